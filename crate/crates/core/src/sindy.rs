//! Sequentially thresholded least squares over fixed dictionaries.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::equation::LearnedEquation;
use crate::error::{Error, Result};
use crate::gram::regularized_solve_vec;
use crate::points::Points;
use crate::problems::ProblemId;

pub const DEFAULT_THRESHOLD: f64 = 0.005;
pub const DEFAULT_MAX_ITERS: usize = 20;
/// Nugget for the (column-scaled) normal equations.
const LSQ_NUGGET: f64 = 1e-12;

/// A closed-form dictionary function of the feature vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Term {
    Constant,
    /// `prod s[i]^p` over `(i, p)` pairs.
    Monomial {
        powers: Vec<(usize, u32)>,
    },
    Sin {
        input: usize,
    },
    Cos {
        input: usize,
    },
}

impl Term {
    pub fn constant() -> Self {
        Term::Constant
    }

    pub fn monomial(powers: &[(usize, u32)]) -> Self {
        Term::Monomial {
            powers: powers.to_vec(),
        }
    }

    pub fn eval(&self, s: &[f64]) -> f64 {
        match self {
            Term::Constant => 1.0,
            Term::Monomial { powers } => powers.iter().map(|&(i, p)| s[i].powi(p as i32)).product(),
            Term::Sin { input } => s[*input].sin(),
            Term::Cos { input } => s[*input].cos(),
        }
    }

    /// `out += scale * grad(term)(s)`.
    pub fn accumulate_gradient(&self, s: &[f64], scale: f64, out: &mut [f64]) {
        match self {
            Term::Constant => {}
            Term::Monomial { powers } => {
                for (k, &(i, p)) in powers.iter().enumerate() {
                    if p == 0 {
                        continue;
                    }
                    let mut g = p as f64 * s[i].powi(p as i32 - 1);
                    for (m, &(j, q)) in powers.iter().enumerate() {
                        if m != k {
                            g *= s[j].powi(q as i32);
                        }
                    }
                    out[i] += scale * g;
                }
            }
            Term::Sin { input } => out[*input] += scale * s[*input].cos(),
            Term::Cos { input } => out[*input] -= scale * s[*input].sin(),
        }
    }

    fn max_input(&self) -> Option<usize> {
        match self {
            Term::Constant => None,
            Term::Monomial { powers } => powers.iter().map(|(i, _)| *i).max(),
            Term::Sin { input } | Term::Cos { input } => Some(*input),
        }
    }

    pub fn display(&self, feature_names: &[&str]) -> String {
        let name = |i: usize| feature_names.get(i).copied().unwrap_or("?").to_string();
        match self {
            Term::Constant => "1".into(),
            Term::Monomial { powers } => powers
                .iter()
                .map(|&(i, p)| if p == 1 { name(i) } else { format!("{}^{p}", name(i)) })
                .collect::<Vec<_>>()
                .join("*"),
            Term::Sin { input } => format!("sin({})", name(*input)),
            Term::Cos { input } => format!("cos({})", name(*input)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    pub terms: Vec<Term>,
    pub names: Vec<String>,
    input_dim: usize,
}

impl Dictionary {
    /// Dictionary over feature vectors of length `input_dim`, with generic names.
    pub fn new(terms: Vec<Term>, input_dim: usize) -> Result<Self> {
        let generic: Vec<String> = (0..input_dim).map(|i| format!("s{}", i + 1)).collect();
        let refs: Vec<&str> = generic.iter().map(String::as_str).collect();
        Self::with_feature_names(terms, &refs)
    }

    pub fn with_feature_names(terms: Vec<Term>, feature_names: &[&str]) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::invalid("a dictionary needs at least one term"));
        }
        let input_dim = feature_names.len();
        if let Some(t) = terms.iter().find(|t| t.max_input().is_some_and(|i| i >= input_dim)) {
            return Err(Error::invalid(format!(
                "term {t:?} reads past the {input_dim} features"
            )));
        }
        let names = terms.iter().map(|t| t.display(feature_names)).collect();
        Ok(Self {
            terms,
            names,
            input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Rows are samples, columns are terms.
    pub fn design_matrix(&self, features: &Points) -> Result<Mat<f64>> {
        if features.dim() != self.input_dim {
            return Err(Error::invalid(format!(
                "features have {} columns, dictionary expects {}",
                features.dim(),
                self.input_dim
            )));
        }
        Ok(Mat::from_fn(features.len(), self.len(), |i, j| {
            self.terms[j].eval(features.row(i))
        }))
    }
}

/// Dictionary for the learned part of a benchmark problem.
///
/// Pendulum: the second equation over features `(u1, u2)`.
/// Diffusion: the implicit form over features `(u, u_t, u_xx)`, regressed onto the source.
pub fn build_dictionary(problem: ProblemId) -> Result<Dictionary> {
    match problem {
        ProblemId::Pendulum => Dictionary::with_feature_names(
            vec![
                Term::monomial(&[(0, 1)]),
                Term::monomial(&[(0, 2)]),
                Term::monomial(&[(0, 3)]),
                Term::Sin { input: 0 },
                Term::Cos { input: 0 },
                Term::Constant,
            ],
            &["u1", "u2"],
        ),
        ProblemId::Diffusion => {
            let (u, ut, uxx) = (0, 1, 2);
            Dictionary::with_feature_names(
                vec![
                    Term::monomial(&[(ut, 1)]),
                    Term::monomial(&[(uxx, 1)]),
                    Term::monomial(&[(u, 1)]),
                    Term::monomial(&[(u, 2)]),
                    Term::monomial(&[(u, 3)]),
                    Term::monomial(&[(u, 1), (uxx, 1)]),
                    Term::monomial(&[(u, 2), (uxx, 1)]),
                    Term::monomial(&[(u, 3), (uxx, 1)]),
                    Term::monomial(&[(u, 1), (ut, 1)]),
                    Term::monomial(&[(u, 2), (ut, 1)]),
                    Term::monomial(&[(u, 3), (ut, 1)]),
                    Term::Constant,
                ],
                &["u", "u_t", "u_xx"],
            )
        }
        ProblemId::Darcy => Err(Error::Unsupported(
            "no dictionary is available for the variable-coefficient Darcy problem".into(),
        )),
    }
}

/// Least squares restricted to `active` columns; inactive coefficients are zero.
fn active_lstsq(design: &Mat<f64>, target: &[f64], active: &[bool]) -> Result<Vec<f64>> {
    let cols: Vec<usize> = (0..active.len()).filter(|&j| active[j]).collect();
    let n = design.nrows();
    let scale: Vec<f64> = cols
        .iter()
        .map(|&j| {
            let s = (0..n).map(|i| design[(i, j)].powi(2)).sum::<f64>().sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let k = cols.len();
    let mut normal = Mat::<f64>::zeros(k, k);
    let mut rhs = vec![0.0; k];
    for a in 0..k {
        let ja = cols[a];
        rhs[a] = (0..n).map(|i| design[(i, ja)] * target[i]).sum::<f64>() / scale[a];
        for b in 0..=a {
            let jb = cols[b];
            let v = (0..n).map(|i| design[(i, ja)] * design[(i, jb)]).sum::<f64>() / (scale[a] * scale[b]);
            normal[(a, b)] = v;
            normal[(b, a)] = v;
        }
    }
    let (sol, _) = regularized_solve_vec(&normal, LSQ_NUGGET, &rhs)?;
    let mut coef = vec![0.0; active.len()];
    for (a, &j) in cols.iter().enumerate() {
        coef[j] = sol[a] / scale[a];
    }
    Ok(coef)
}

/// Sequentially thresholded least squares starting from the full support.
pub fn stlsq(design: &Mat<f64>, target: &[f64], threshold: f64, max_iters: usize) -> Result<Vec<f64>> {
    stlsq_from(design, target, threshold, max_iters, &vec![true; design.ncols()])
}

/// STLSQ starting from a given support.
pub fn stlsq_from(
    design: &Mat<f64>,
    target: &[f64],
    threshold: f64,
    max_iters: usize,
    initial_support: &[bool],
) -> Result<Vec<f64>> {
    if design.nrows() != target.len() {
        return Err(Error::invalid(format!(
            "design has {} rows but the target has {} entries",
            design.nrows(),
            target.len()
        )));
    }
    if !(threshold > 0.0) {
        return Err(Error::invalid(format!("threshold must be > 0, got {threshold}")));
    }
    if max_iters == 0 {
        return Err(Error::invalid("max_iters must be >= 1"));
    }
    if initial_support.len() != design.ncols() {
        return Err(Error::invalid("initial support length does not match the dictionary"));
    }
    let mut active = initial_support.to_vec();
    if !active.iter().any(|&a| a) {
        return Err(Error::DegenerateModel("empty initial support".into()));
    }
    let mut coef = active_lstsq(design, target, &active)?;
    for _ in 0..max_iters {
        let next: Vec<bool> = active
            .iter()
            .zip(&coef)
            .map(|(&a, c)| a && c.abs() >= threshold)
            .collect();
        if !next.iter().any(|&a| a) {
            return Err(Error::DegenerateModel(format!(
                "every coefficient fell below the threshold {threshold}"
            )));
        }
        if next == active {
            break;
        }
        active = next;
        coef = active_lstsq(design, target, &active)?;
    }
    for c in coef.iter_mut() {
        if c.abs() < threshold {
            *c = 0.0;
        }
    }
    Ok(coef)
}

/// Wraps STLSQ coefficients as a learned equation.
pub fn as_equation(dict: &Dictionary, coeffs: &[f64], feature_layout: Vec<String>) -> Result<LearnedEquation> {
    if coeffs.len() != dict.len() {
        return Err(Error::invalid(format!(
            "{} coefficients for a dictionary of {} terms",
            coeffs.len(),
            dict.len()
        )));
    }
    Ok(LearnedEquation::SparseDictionary {
        dictionary: dict.clone(),
        coefficients: coeffs.to_vec(),
        feature_layout,
    })
}
