//! Kernel smoothing of noisy solution samples and derivative estimation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gram::{kernel_matrix, regularized_solve_vec};
use crate::kernel::{apply_unchecked, check_orders, DiffOp, KernelSpec, MultiIndex};
use crate::points::Points;

/// Noisy observations of one solution on a point set.
#[derive(Clone, Debug)]
pub struct FieldSamples {
    pub points: Points,
    pub values: Vec<f64>,
    /// Regularization `lambda_U`; the nugget applied is its square.
    pub noise_level: f64,
}

impl FieldSamples {
    pub fn new(points: Points, values: Vec<f64>, noise_level: f64) -> Result<Self> {
        if points.len() != values.len() {
            return Err(Error::invalid(format!(
                "{} sample points but {} values",
                points.len(),
                values.len()
            )));
        }
        if !(noise_level.is_finite() && noise_level >= 0.0) {
            return Err(Error::invalid(format!("noise level must be >= 0, got {noise_level}")));
        }
        if points.len() > 1 && points.min_separation() <= 0.0 {
            return Err(Error::invalid("sample points must be distinct"));
        }
        Ok(Self {
            points,
            values,
            noise_level,
        })
    }
}

/// A fitted kernel ridge regressor `x -> U(x, X) w`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothedField {
    pub kernel: KernelSpec,
    pub centers: Points,
    pub weights: Vec<f64>,
}

/// Fits `w = (U(X, X) + lambda_U^2 I)^{-1} u`.
pub fn fit_smoother(kernel: &KernelSpec, samples: &FieldSamples) -> Result<SmoothedField> {
    if samples.points.dim() != kernel.dim() {
        return Err(Error::invalid(format!(
            "kernel dimension {} does not match sample dimension {}",
            kernel.dim(),
            samples.points.dim()
        )));
    }
    let g = kernel_matrix(kernel, &samples.points, &samples.points)?;
    let nugget = samples.noise_level * samples.noise_level;
    let (weights, _) = regularized_solve_vec(&g, nugget, &samples.values)?;
    Ok(SmoothedField {
        kernel: kernel.clone(),
        centers: samples.points.clone(),
        weights,
    })
}

impl SmoothedField {
    /// `(op u_bar)(x)`.
    pub fn eval_op(&self, op: &DiffOp, x: &[f64]) -> Result<f64> {
        let d = self.kernel.dim();
        if x.len() != d {
            return Err(Error::invalid(format!(
                "point of dimension {} for a field over R^{d}",
                x.len()
            )));
        }
        let zero = MultiIndex::zero(d);
        for (_, a) in &op.terms {
            check_orders(&self.kernel, a, &zero)?;
        }
        let value = DiffOp::value(d);
        Ok(self
            .centers
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| w * apply_unchecked(&self.kernel, op, &value, x, c))
            .sum())
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        self.eval_op(&DiffOp::value(self.kernel.dim()), x)
    }
}

/// `d^alpha u_bar(x)`.
pub fn eval_smoothed(field: &SmoothedField, alpha: &MultiIndex, x: &[f64]) -> Result<f64> {
    field.eval_op(&DiffOp::from_index(alpha.clone()), x)
}

/// One column of a feature matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FeatureColumn {
    /// The `axis`-th coordinate of the evaluation point.
    Coordinate { axis: usize, name: String },
    /// `op` applied to the smoothed field number `component`.
    Derivative { component: usize, op: DiffOp, name: String },
}

impl FeatureColumn {
    pub fn name(&self) -> &str {
        match self {
            FeatureColumn::Coordinate { name, .. } | FeatureColumn::Derivative { name, .. } => name,
        }
    }
}

/// Ordered description of the feature vector fed to a learned equation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub columns: Vec<FeatureColumn>,
}

impl FeatureLayout {
    pub fn new(columns: Vec<FeatureColumn>) -> Self {
        Self { columns }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name().to_string()).collect()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name() == name)
    }
}

/// Builds one feature row per grid point from the smoothed fields of a single
/// training instance (`fields[c]` is component `c`).
pub fn build_features(fields: &[&SmoothedField], grid: &Points, layout: &FeatureLayout) -> Result<Points> {
    if layout.is_empty() {
        return Err(Error::invalid("feature layout has no columns"));
    }
    let mut out = Points::empty(layout.len());
    let mut row = vec![0.0; layout.len()];
    for x in grid.iter() {
        for (k, col) in layout.columns.iter().enumerate() {
            row[k] = match col {
                FeatureColumn::Coordinate { axis, .. } => *x
                    .get(*axis)
                    .ok_or_else(|| Error::invalid(format!("coordinate axis {axis} out of range")))?,
                FeatureColumn::Derivative { component, op, .. } => fields
                    .get(*component)
                    .ok_or_else(|| Error::invalid(format!("no smoothed field for component {component}")))?
                    .eval_op(op, x)?,
            };
        }
        out.push(&row)?;
    }
    Ok(out)
}
