//! Mercer kernels and their closed-form mixed partial derivatives.
//!
//! The Gaussian and ARD kernels factor over coordinates, so every mixed
//! partial is a product of one-dimensional factors of the form
//! `(-1)^a * l^-(a+b) * He_{a+b}(r / l) * exp(-r^2 / 2 l^2)`, where `He_n` is
//! the probabilists' Hermite polynomial, `a` the order in the first argument
//! and `b` the order in the second.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest total derivative order per argument for the Gaussian family.
pub const MAX_GAUSSIAN_ORDER: u32 = 2;
/// Largest total derivative order per argument for the polynomial kernel.
pub const MAX_POLYNOMIAL_ORDER: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum KernelSpec {
    /// `exp(-|x - y|^2 / (2 sigma^2))`.
    Gaussian { sigma: f64, dim: usize },
    /// Tensor product of 1-D Gaussians with one length scale per coordinate.
    Ard { lengthscales: Vec<f64> },
    /// `(x . y + offset)^degree`.
    Polynomial { degree: u32, offset: f64, dim: usize },
}

impl KernelSpec {
    pub fn gaussian(sigma: f64, dim: usize) -> Result<Self> {
        let k = KernelSpec::Gaussian { sigma, dim };
        k.validate()?;
        Ok(k)
    }

    pub fn ard(lengthscales: Vec<f64>) -> Result<Self> {
        let k = KernelSpec::Ard { lengthscales };
        k.validate()?;
        Ok(k)
    }

    pub fn polynomial(degree: u32, offset: f64, dim: usize) -> Result<Self> {
        let k = KernelSpec::Polynomial { degree, offset, dim };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::Gaussian { sigma, dim } => {
                if !(sigma.is_finite() && *sigma > 0.0) {
                    return Err(Error::invalid(format!("gaussian sigma must be > 0, got {sigma}")));
                }
                if *dim == 0 {
                    return Err(Error::invalid("kernel dimension must be >= 1"));
                }
            }
            KernelSpec::Ard { lengthscales } => {
                if lengthscales.is_empty() {
                    return Err(Error::invalid("ARD kernel needs at least one length scale"));
                }
                if let Some(l) = lengthscales.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
                    return Err(Error::invalid(format!("ARD length scales must be > 0, got {l}")));
                }
            }
            KernelSpec::Polynomial { degree, offset, dim } => {
                if !(1..=5).contains(degree) {
                    return Err(Error::invalid(format!(
                        "polynomial degree must be in 1..=5, got {degree}"
                    )));
                }
                if !(offset.is_finite() && *offset >= 0.0) {
                    return Err(Error::invalid(format!("polynomial offset must be >= 0, got {offset}")));
                }
                if *dim == 0 {
                    return Err(Error::invalid("kernel dimension must be >= 1"));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            KernelSpec::Gaussian { dim, .. } | KernelSpec::Polynomial { dim, .. } => *dim,
            KernelSpec::Ard { lengthscales } => lengthscales.len(),
        }
    }

    /// Length scale along coordinate `d` for the Gaussian family.
    fn lengthscale(&self, d: usize) -> f64 {
        match self {
            KernelSpec::Gaussian { sigma, .. } => *sigma,
            KernelSpec::Ard { lengthscales } => lengthscales[d],
            KernelSpec::Polynomial { .. } => unreachable!("polynomial kernel has no length scale"),
        }
    }

    fn max_order(&self) -> u32 {
        match self {
            KernelSpec::Polynomial { .. } => MAX_POLYNOMIAL_ORDER,
            _ => MAX_GAUSSIAN_ORDER,
        }
    }

    fn check_dims(&self, x: &[f64], y: &[f64]) -> Result<()> {
        let d = self.dim();
        if x.len() != d || y.len() != d {
            return Err(Error::invalid(format!(
                "kernel built for dimension {d}, got points of dimension {} and {}",
                x.len(),
                y.len()
            )));
        }
        Ok(())
    }
}

/// Per-coordinate derivative orders.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MultiIndex(pub Vec<u32>);

impl MultiIndex {
    pub fn zero(dim: usize) -> Self {
        MultiIndex(vec![0; dim])
    }

    pub fn unit(dim: usize, axis: usize) -> Self {
        let mut v = vec![0; dim];
        v[axis] = 1;
        MultiIndex(v)
    }

    pub fn second(dim: usize, axis: usize) -> Self {
        let mut v = vec![0; dim];
        v[axis] = 2;
        MultiIndex(v)
    }

    pub fn order(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn orders(&self) -> &[u32] {
        &self.0
    }
}

/// A linear differential operator `sum_k c_k d^{alpha_k}`, e.g. the Laplacian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffOp {
    pub terms: Vec<(f64, MultiIndex)>,
}

impl DiffOp {
    pub fn value(dim: usize) -> Self {
        Self::from_index(MultiIndex::zero(dim))
    }

    pub fn partial(dim: usize, axis: usize) -> Self {
        Self::from_index(MultiIndex::unit(dim, axis))
    }

    pub fn second(dim: usize, axis: usize) -> Self {
        Self::from_index(MultiIndex::second(dim, axis))
    }

    pub fn laplacian(dim: usize) -> Self {
        DiffOp {
            terms: (0..dim).map(|a| (1.0, MultiIndex::second(dim, a))).collect(),
        }
    }

    pub fn from_index(alpha: MultiIndex) -> Self {
        DiffOp {
            terms: vec![(1.0, alpha)],
        }
    }

    pub fn order(&self) -> u32 {
        self.terms.iter().map(|(_, a)| a.order()).max().unwrap_or(0)
    }

    pub fn is_value(&self) -> bool {
        self.terms.len() == 1 && self.terms[0].0 == 1.0 && self.terms[0].1.order() == 0
    }
}

/// Probabilists' Hermite polynomial `He_n(t)`.
pub(crate) fn hermite(n: u32, t: f64) -> f64 {
    match n {
        0 => 1.0,
        1 => t,
        2 => t * t - 1.0,
        3 => t * (t * t - 3.0),
        4 => {
            let t2 = t * t;
            t2 * t2 - 6.0 * t2 + 3.0
        }
        _ => {
            let (mut prev, mut cur) = (t * (t * t - 3.0), {
                let t2 = t * t;
                t2 * t2 - 6.0 * t2 + 3.0
            });
            for k in 4..n {
                let next = t * cur - k as f64 * prev;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

/// `K(x, y)`.
pub fn kernel_eval(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    spec.check_dims(x, y)?;
    Ok(eval_unchecked(spec, x, y))
}

pub(crate) fn eval_unchecked(spec: &KernelSpec, x: &[f64], y: &[f64]) -> f64 {
    match spec {
        KernelSpec::Gaussian { sigma, .. } => {
            let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
            (-0.5 * r2 / (sigma * sigma)).exp()
        }
        KernelSpec::Ard { lengthscales } => {
            let mut q = 0.0;
            for ((a, b), l) in x.iter().zip(y).zip(lengthscales) {
                let t = (a - b) / l;
                q += t * t;
            }
            (-0.5 * q).exp()
        }
        KernelSpec::Polynomial { degree, offset, .. } => {
            let s: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() + offset;
            s.powi(*degree as i32)
        }
    }
}

/// `d^alpha_x d^beta_y K(x, y)`.
pub fn kernel_deriv(spec: &KernelSpec, alpha: &MultiIndex, beta: &MultiIndex, x: &[f64], y: &[f64]) -> Result<f64> {
    spec.check_dims(x, y)?;
    check_orders(spec, alpha, beta)?;
    Ok(deriv_unchecked(spec, alpha.orders(), beta.orders(), x, y))
}

pub(crate) fn check_orders(spec: &KernelSpec, alpha: &MultiIndex, beta: &MultiIndex) -> Result<()> {
    let d = spec.dim();
    if alpha.dim() != d || beta.dim() != d {
        return Err(Error::invalid(format!(
            "multi-index dimension ({}, {}) does not match kernel dimension {d}",
            alpha.dim(),
            beta.dim()
        )));
    }
    let max = spec.max_order();
    if alpha.order() > max || beta.order() > max {
        return Err(Error::Unsupported(format!(
            "derivative orders ({}, {}) exceed the supported maximum {max} for {} kernels",
            alpha.order(),
            beta.order(),
            family_name(spec)
        )));
    }
    Ok(())
}

fn family_name(spec: &KernelSpec) -> &'static str {
    match spec {
        KernelSpec::Gaussian { .. } => "gaussian",
        KernelSpec::Ard { .. } => "ARD",
        KernelSpec::Polynomial { .. } => "polynomial",
    }
}

pub(crate) fn deriv_unchecked(spec: &KernelSpec, alpha: &[u32], beta: &[u32], x: &[f64], y: &[f64]) -> f64 {
    match spec {
        KernelSpec::Polynomial { degree, offset, .. } => poly_deriv(*degree, *offset, alpha, beta, x, y),
        _ => {
            let mut q = 0.0;
            let mut factor = 1.0;
            for d in 0..x.len() {
                let l = spec.lengthscale(d);
                let t = (x[d] - y[d]) / l;
                q += t * t;
                let n = alpha[d] + beta[d];
                if n > 0 {
                    let sign = if alpha[d] % 2 == 1 { -1.0 } else { 1.0 };
                    factor *= sign * hermite(n, t) / l.powi(n as i32);
                }
            }
            factor * (-0.5 * q).exp()
        }
    }
}

fn poly_deriv(degree: u32, offset: f64, alpha: &[u32], beta: &[u32], x: &[f64], y: &[f64]) -> f64 {
    let s: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() + offset;
    let d = degree as f64;
    // powi of a possibly-zero base with a negative exponent is not wanted here
    let pow = |k: u32| -> f64 {
        if k > degree {
            0.0
        } else {
            s.powi((degree - k) as i32)
        }
    };
    let ia = alpha.iter().position(|&o| o == 1);
    let ib = beta.iter().position(|&o| o == 1);
    match (ia, ib) {
        (None, None) => pow(0),
        (Some(i), None) => d * pow(1) * y[i],
        (None, Some(j)) => d * pow(1) * x[j],
        (Some(i), Some(j)) => {
            let mut v = d * (d - 1.0) * pow(2) * x[j] * y[i];
            if i == j {
                v += d * pow(1);
            }
            v
        }
    }
}

/// Applies `op_x` in the first argument and `op_y` in the second.
pub fn kernel_apply(spec: &KernelSpec, op_x: &DiffOp, op_y: &DiffOp, x: &[f64], y: &[f64]) -> Result<f64> {
    spec.check_dims(x, y)?;
    for (_, a) in &op_x.terms {
        for (_, b) in &op_y.terms {
            check_orders(spec, a, b)?;
        }
    }
    Ok(apply_unchecked(spec, op_x, op_y, x, y))
}

pub(crate) fn apply_unchecked(spec: &KernelSpec, op_x: &DiffOp, op_y: &DiffOp, x: &[f64], y: &[f64]) -> f64 {
    match spec {
        KernelSpec::Polynomial { .. } => {
            let mut acc = 0.0;
            for (ca, a) in &op_x.terms {
                for (cb, b) in &op_y.terms {
                    acc += ca * cb * deriv_unchecked(spec, a.orders(), b.orders(), x, y);
                }
            }
            acc
        }
        _ => {
            // share the exponential across all term pairs
            let dim = x.len();
            let mut q = 0.0;
            for d in 0..dim {
                let t = (x[d] - y[d]) / spec.lengthscale(d);
                q += t * t;
            }
            let e = (-0.5 * q).exp();
            let mut acc = 0.0;
            for (ca, a) in &op_x.terms {
                for (cb, b) in &op_y.terms {
                    let mut factor = ca * cb;
                    for d in 0..dim {
                        let n = a.0[d] + b.0[d];
                        if n > 0 {
                            let l = spec.lengthscale(d);
                            let t = (x[d] - y[d]) / l;
                            let sign = if a.0[d] % 2 == 1 { -1.0 } else { 1.0 };
                            factor *= sign * hermite(n, t) / l.powi(n as i32);
                        }
                    }
                    acc += factor;
                }
            }
            acc * e
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd4(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h)
    }

    #[test]
    fn gaussian_values() {
        let k = KernelSpec::gaussian(1.0, 2).unwrap();
        assert_eq!(kernel_eval(&k, &[0.3, -1.0], &[0.3, -1.0]).unwrap(), 1.0);
        let v = kernel_eval(&k, &[0.0, 0.0], &[0.6, 0.8]).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!((v - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn polynomial_value() {
        let k = KernelSpec::polynomial(2, 0.0, 2).unwrap();
        assert_eq!(kernel_eval(&k, &[1.0, 1.0], &[1.0, 1.0]).unwrap(), 4.0);
    }

    #[test]
    fn ard_value_is_product_of_factors() {
        let k = KernelSpec::ard(vec![1.0, 2.0]).unwrap();
        let v = kernel_eval(&k, &[0.0, 0.0], &[1.0, 2.0]).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let k = KernelSpec::gaussian(1.0, 2).unwrap();
        assert!(matches!(
            kernel_eval(&k, &[0.0], &[0.0, 1.0]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn invalid_hyperparameters() {
        assert!(KernelSpec::gaussian(0.0, 1).is_err());
        assert!(KernelSpec::ard(vec![1.0, -1.0]).is_err());
        assert!(KernelSpec::polynomial(0, 1.0, 1).is_err());
        assert!(KernelSpec::polynomial(6, 1.0, 1).is_err());
        assert!(KernelSpec::polynomial(2, -0.1, 1).is_err());
    }

    #[test]
    fn zeroth_derivative_is_value() {
        let k = KernelSpec::ard(vec![0.7, 1.3]).unwrap();
        let (x, y) = ([0.2, 0.5], [-0.4, 1.1]);
        let z = MultiIndex::zero(2);
        assert_eq!(
            kernel_deriv(&k, &z, &z, &x, &y).unwrap(),
            kernel_eval(&k, &x, &y).unwrap()
        );
    }

    #[test]
    fn odd_derivative_vanishes_on_diagonal() {
        let k = KernelSpec::gaussian(1.0, 1).unwrap();
        let v = kernel_deriv(&k, &MultiIndex(vec![1]), &MultiIndex(vec![0]), &[0.4], &[0.4]).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn second_derivative_matches_central_difference() {
        let k = KernelSpec::gaussian(1.0, 1).unwrap();
        let exact = kernel_deriv(&k, &MultiIndex(vec![2]), &MultiIndex(vec![0]), &[0.0], &[1.0]).unwrap();
        // (r^2 - 1) e^{-r^2/2} at r = 1 is zero; compare against a nested fourth-order difference
        let d1 = |x: f64| fd4(|s| kernel_eval(&k, &[s], &[1.0]).unwrap(), x, 1e-4);
        let fd = fd4(d1, 0.0, 1e-4);
        assert!((exact - fd).abs() < 1e-6 * (1.0 + exact.abs()), "{exact} vs {fd}");
    }

    #[test]
    fn unsupported_orders() {
        let k = KernelSpec::gaussian(1.0, 1).unwrap();
        let r = kernel_deriv(&k, &MultiIndex(vec![3]), &MultiIndex(vec![0]), &[0.0], &[1.0]);
        assert!(matches!(r, Err(Error::Unsupported(_))));
        let p = KernelSpec::polynomial(3, 1.0, 1).unwrap();
        let r = kernel_deriv(&p, &MultiIndex(vec![2]), &MultiIndex(vec![0]), &[0.0], &[1.0]);
        assert!(matches!(r, Err(Error::Unsupported(_))));
    }

    #[test]
    fn hermite_recurrence_matches_closed_forms() {
        for &t in &[-1.7, 0.0, 0.4, 2.2] {
            let he5 = t * t * t * t * t - 10.0 * t * t * t + 15.0 * t;
            assert!((hermite(5, t) - he5).abs() < 1e-12);
        }
    }

    #[test]
    fn laplacian_apply_matches_sum_of_terms() {
        let k = KernelSpec::gaussian(0.6, 2).unwrap();
        let (x, y) = ([0.1, 0.3], [0.5, -0.2]);
        let lap = DiffOp::laplacian(2);
        let v = DiffOp::value(2);
        let direct = kernel_apply(&k, &lap, &v, &x, &y).unwrap();
        let sum = kernel_deriv(&k, &MultiIndex(vec![2, 0]), &MultiIndex::zero(2), &x, &y).unwrap()
            + kernel_deriv(&k, &MultiIndex(vec![0, 2]), &MultiIndex::zero(2), &x, &y).unwrap();
        assert!((direct - sum).abs() < 1e-14);
    }
}
