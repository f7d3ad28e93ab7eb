//! Learning the algebraic form of an equation from feature vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gram::{kernel_matrix, regularized_solve_vec};
use crate::kernel::{eval_unchecked, KernelSpec};
use crate::points::{norm2, Points};
use crate::sindy::Dictionary;

/// Rows of a feature matrix closer than this in max-norm are merged before fitting.
pub const DEDUP_TOL: f64 = 1e-10;

/// A differentiable scalar function of a feature vector.
pub trait ScalarField: Send + Sync {
    fn input_dim(&self) -> usize;
    fn value(&self, s: &[f64]) -> f64;
    /// Writes the gradient with respect to `s` into `out`.
    fn gradient(&self, s: &[f64], out: &mut [f64]);
}

/// A learned map `s -> P_bar(s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LearnedEquation {
    /// `K(s, S) (K(S, S) + lambda_K^2 I)^{-1} f`.
    KernelRegressor {
        kernel: KernelSpec,
        centers: Points,
        weights: Vec<f64>,
        feature_layout: Vec<String>,
    },
    /// `sum_i c_i theta_i(s)`.
    SparseDictionary {
        dictionary: Dictionary,
        coefficients: Vec<f64>,
        feature_layout: Vec<String>,
    },
}

/// Merges feature rows that coincide to within [`DEDUP_TOL`], averaging their targets.
fn dedup_rows(features: &Points, targets: &[f64]) -> (Points, Vec<f64>) {
    let n = features.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| features.row(a)[0].total_cmp(&features.row(b)[0]));
    let mut rep = vec![usize::MAX; n];
    for (pos, &i) in order.iter().enumerate() {
        if rep[i] != usize::MAX {
            continue;
        }
        rep[i] = i;
        let ri = features.row(i);
        for &j in &order[pos + 1..] {
            let rj = features.row(j);
            if rj[0] - ri[0] > DEDUP_TOL {
                break;
            }
            if rep[j] == usize::MAX && ri.iter().zip(rj).all(|(a, b)| (a - b).abs() <= DEDUP_TOL) {
                rep[j] = i;
            }
        }
    }
    let mut out = Points::empty(features.dim());
    let mut sums: Vec<(f64, usize)> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = rep[i];
        if slot[r] == usize::MAX {
            slot[r] = sums.len();
            sums.push((0.0, 0));
            out.push(features.row(r)).expect("same dimension");
        }
        let s = &mut sums[slot[r]];
        s.0 += targets[i];
        s.1 += 1;
    }
    (out, sums.into_iter().map(|(s, c)| s / c as f64).collect())
}

/// Kernel optimal recovery of `P_bar` from `(features, targets)` with nugget `lambda_K^2`.
pub fn fit_equation(
    kernel: &KernelSpec,
    features: &Points,
    targets: &[f64],
    nugget: f64,
    feature_layout: Vec<String>,
) -> Result<LearnedEquation> {
    if features.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} feature rows but {} targets",
            features.len(),
            targets.len()
        )));
    }
    if features.is_empty() {
        return Err(Error::invalid("cannot fit an equation to zero samples"));
    }
    if features.dim() != kernel.dim() {
        return Err(Error::invalid(format!(
            "features have {} columns, kernel expects {}",
            features.dim(),
            kernel.dim()
        )));
    }
    if !feature_layout.is_empty() && feature_layout.len() != features.dim() {
        return Err(Error::invalid(
            "feature layout length does not match the feature dimension",
        ));
    }
    let (centers, f) = dedup_rows(features, targets);
    let g = kernel_matrix(kernel, &centers, &centers)?;
    let (weights, _) = regularized_solve_vec(&g, nugget * nugget, &f)?;
    Ok(LearnedEquation::KernelRegressor {
        kernel: kernel.clone(),
        centers,
        weights,
        feature_layout,
    })
}

impl LearnedEquation {
    pub fn feature_layout(&self) -> &[String] {
        match self {
            LearnedEquation::KernelRegressor { feature_layout, .. }
            | LearnedEquation::SparseDictionary { feature_layout, .. } => feature_layout,
        }
    }

    fn check_input(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "feature vector has length {}, equation expects {}",
                s.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let eq: Self = serde_json::from_str(s)?;
        eq.validate()?;
        Ok(eq)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LearnedEquation::KernelRegressor {
                kernel,
                centers,
                weights,
                ..
            } => {
                kernel.validate()?;
                if centers.len() != weights.len() || centers.dim() != kernel.dim() {
                    return Err(Error::invalid("kernel regressor centers, weights and kernel disagree"));
                }
            }
            LearnedEquation::SparseDictionary {
                dictionary,
                coefficients,
                ..
            } => {
                if dictionary.len() != coefficients.len() {
                    return Err(Error::invalid("dictionary and coefficient counts differ"));
                }
            }
        }
        Ok(())
    }
}

impl ScalarField for LearnedEquation {
    fn input_dim(&self) -> usize {
        match self {
            LearnedEquation::KernelRegressor { kernel, .. } => kernel.dim(),
            LearnedEquation::SparseDictionary { dictionary, .. } => dictionary.input_dim(),
        }
    }

    fn value(&self, s: &[f64]) -> f64 {
        match self {
            LearnedEquation::KernelRegressor {
                kernel,
                centers,
                weights,
                ..
            } => centers
                .iter()
                .zip(weights)
                .map(|(c, w)| w * eval_unchecked(kernel, s, c))
                .sum(),
            LearnedEquation::SparseDictionary {
                dictionary,
                coefficients,
                ..
            } => dictionary
                .terms
                .iter()
                .zip(coefficients)
                .filter(|(_, c)| **c != 0.0)
                .map(|(t, c)| c * t.eval(s))
                .sum(),
        }
    }

    fn gradient(&self, s: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        match self {
            LearnedEquation::KernelRegressor {
                kernel,
                centers,
                weights,
                ..
            } => match kernel {
                KernelSpec::Gaussian { sigma, .. } => {
                    let inv = 1.0 / (sigma * sigma);
                    for (c, w) in centers.iter().zip(weights) {
                        let k = w * eval_unchecked(kernel, s, c);
                        for d in 0..s.len() {
                            out[d] -= k * (s[d] - c[d]) * inv;
                        }
                    }
                }
                KernelSpec::Ard { lengthscales } => {
                    for (c, w) in centers.iter().zip(weights) {
                        let k = w * eval_unchecked(kernel, s, c);
                        for d in 0..s.len() {
                            out[d] -= k * (s[d] - c[d]) / (lengthscales[d] * lengthscales[d]);
                        }
                    }
                }
                KernelSpec::Polynomial { degree, offset, .. } => {
                    let p = *degree as f64;
                    for (c, w) in centers.iter().zip(weights) {
                        let base: f64 = s.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() + offset;
                        let g = w * p * base.powi(*degree as i32 - 1);
                        for d in 0..s.len() {
                            out[d] += g * c[d];
                        }
                    }
                }
            },
            LearnedEquation::SparseDictionary {
                dictionary,
                coefficients,
                ..
            } => {
                for (t, c) in dictionary.terms.iter().zip(coefficients) {
                    if *c != 0.0 {
                        t.accumulate_gradient(s, *c, out);
                    }
                }
            }
        }
    }
}

type ValueFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// A [`ScalarField`] built from closures, used for known equations.
pub struct FnField {
    dim: usize,
    value: Box<ValueFn>,
    gradient: Box<GradFn>,
}

impl FnField {
    pub fn new(
        dim: usize,
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            value: Box::new(value),
            gradient: Box::new(gradient),
        }
    }
}

impl std::fmt::Debug for FnField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FnField")
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

impl ScalarField for FnField {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn value(&self, s: &[f64]) -> f64 {
        (self.value)(s)
    }

    fn gradient(&self, s: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        (self.gradient)(s, out)
    }
}

/// `P_bar(s)`, with a dimension check.
pub fn eval_equation(eq: &LearnedEquation, s: &[f64]) -> Result<f64> {
    eq.check_input(s)?;
    Ok(eq.value(s))
}

/// `grad_s P_bar(s)`, with a dimension check.
pub fn grad_equation(eq: &LearnedEquation, s: &[f64]) -> Result<Vec<f64>> {
    eq.check_input(s)?;
    let mut g = vec![0.0; s.len()];
    eq.gradient(s, &mut g);
    Ok(g)
}

/// Relative L2 error of `P_bar` over a set of test features.
pub fn equation_discovery_error(eq: &dyn ScalarField, test_features: &Points, test_targets: &[f64]) -> Result<f64> {
    if test_features.len() != test_targets.len() {
        return Err(Error::invalid("test features and targets have different lengths"));
    }
    if test_features.dim() != eq.input_dim() {
        return Err(Error::invalid(
            "test features do not match the equation's input dimension",
        ));
    }
    let denom = norm2(test_targets);
    if denom == 0.0 {
        return Err(Error::invalid("test targets have zero norm"));
    }
    let num = test_features
        .iter()
        .zip(test_targets)
        .map(|(s, t)| (eq.value(s) - t).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(num / denom)
}
