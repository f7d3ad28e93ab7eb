//! Gram matrices over derivative functionals and regularized Cholesky solves.

use faer::linalg::solvers::{Llt, Solve};
use faer::{Mat, MatRef, Par, Side};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{apply_unchecked, check_orders, DiffOp, KernelSpec, MultiIndex};

/// Multiplicative nugget escalation step and the cap relative to the request.
const NUGGET_STEP: f64 = 10.0;
const NUGGET_MAX_FACTOR: f64 = 1e6;
const ASYMMETRY_TOL: f64 = 1e-12;

/// The map `u -> (op u)(point)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Functional {
    pub point: Vec<f64>,
    pub op: DiffOp,
}

impl Functional {
    pub fn new(point: Vec<f64>, op: DiffOp) -> Self {
        Self { point, op }
    }

    /// Pointwise evaluation.
    pub fn delta(point: Vec<f64>) -> Self {
        let d = point.len();
        Self::new(point, DiffOp::value(d))
    }

    pub fn with_index(point: Vec<f64>, index: MultiIndex) -> Self {
        Self::new(point, DiffOp::from_index(index))
    }
}

fn check_functionals(spec: &KernelSpec, fs: &[Functional]) -> Result<()> {
    let d = spec.dim();
    for f in fs {
        if f.point.len() != d {
            return Err(Error::invalid(format!(
                "functional at a point of dimension {} used with a kernel of dimension {d}",
                f.point.len()
            )));
        }
        for (_, a) in &f.op.terms {
            check_orders(spec, a, &MultiIndex::zero(d))?;
        }
    }
    Ok(())
}

/// Entry `(i, j)` is `rows[i]` applied in the first argument and `cols[j]` in
/// the second. Passing the same slice twice yields an exactly symmetric matrix.
pub fn gram(spec: &KernelSpec, rows: &[Functional], cols: &[Functional]) -> Result<Mat<f64>> {
    spec.validate()?;
    check_functionals(spec, rows)?;
    check_functionals(spec, cols)?;
    let symmetric = std::ptr::eq(rows, cols);
    let (n, m) = (rows.len(), cols.len());
    // column-major buffer, filled column by column
    let columns: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|j| {
            let start = if symmetric { j } else { 0 };
            let mut col = vec![0.0; n];
            for i in start..n {
                col[i] = apply_unchecked(spec, &rows[i].op, &cols[j].op, &rows[i].point, &cols[j].point);
            }
            col
        })
        .collect();
    let mut g = Mat::from_fn(n, m, |i, j| columns[j][i]);
    if symmetric {
        for j in 0..m {
            for i in 0..j {
                g[(i, j)] = g[(j, i)];
            }
        }
    }
    Ok(g)
}

/// Plain kernel matrix `K(X, Y)` for point evaluations only.
pub fn kernel_matrix(spec: &KernelSpec, xs: &crate::Points, ys: &crate::Points) -> Result<Mat<f64>> {
    spec.validate()?;
    if xs.dim() != spec.dim() || ys.dim() != spec.dim() {
        return Err(Error::invalid("point dimension does not match kernel"));
    }
    let symmetric = std::ptr::eq(xs, ys);
    let (n, m) = (xs.len(), ys.len());
    let columns: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|j| {
            let yj = ys.row(j);
            let start = if symmetric { j } else { 0 };
            let mut col = vec![0.0; n];
            for (i, c) in col.iter_mut().enumerate().skip(start) {
                *c = crate::kernel::eval_unchecked(spec, xs.row(i), yj);
            }
            col
        })
        .collect();
    let mut g = Mat::from_fn(n, m, |i, j| columns[j][i]);
    if symmetric {
        for j in 0..m {
            for i in 0..j {
                g[(i, j)] = g[(j, i)];
            }
        }
    }
    Ok(g)
}

/// Cholesky factorization of `matrix + nugget * I`.
pub struct GramFactorization {
    matrix: Mat<f64>,
    llt: Llt<f64>,
    nugget: f64,
}

impl std::fmt::Debug for GramFactorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GramFactorization")
            .field("size", &self.matrix.nrows())
            .field("nugget", &self.nugget)
            .finish()
    }
}

impl GramFactorization {
    /// Factorizes `matrix + nugget * I`. On failure the nugget is raised by a
    /// factor of ten at a time, up to `1e6` times the requested value.
    pub fn new(matrix: Mat<f64>, nugget: f64) -> Result<Self> {
        let n = matrix.nrows();
        if matrix.ncols() != n {
            return Err(Error::invalid(format!(
                "gram matrix must be square, got {}x{}",
                n,
                matrix.ncols()
            )));
        }
        if !(nugget.is_finite() && nugget >= 0.0) {
            return Err(Error::invalid(format!(
                "nugget must be a finite non-negative number, got {nugget}"
            )));
        }
        check_symmetric(matrix.as_ref())?;

        // a zero request still needs a positive base to escalate from
        let scale = (0..n)
            .map(|i| matrix[(i, i)].abs())
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        let base = if nugget > 0.0 { nugget } else { f64::EPSILON * scale };
        let cap = base * NUGGET_MAX_FACTOR;

        let mut applied = nugget;
        let mut work = matrix.clone();
        loop {
            if applied != 0.0 {
                for i in 0..n {
                    work[(i, i)] = matrix[(i, i)] + applied;
                }
            }
            if let Ok(llt) = work.llt(Side::Lower) {
                let l = llt.L();
                let ok = (0..n).all(|i| l[(i, i)].is_finite() && l[(i, i)] > 0.0);
                if ok {
                    return Ok(Self {
                        matrix,
                        llt,
                        nugget: applied,
                    });
                }
            }
            let next = if applied == 0.0 { base } else { applied * NUGGET_STEP };
            if next > cap * (1.0 + 1e-12) {
                return Err(Error::NumericalFailure {
                    message: format!("cholesky factorization of a {n}x{n} gram matrix failed"),
                    nugget: Some(applied),
                });
            }
            applied = next;
        }
    }

    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }

    /// The nugget that was actually applied.
    pub fn nugget(&self) -> f64 {
        self.nugget
    }

    /// The matrix before the nugget was added.
    pub fn matrix(&self) -> MatRef<'_, f64> {
        self.matrix.as_ref()
    }

    pub fn lower(&self) -> MatRef<'_, f64> {
        self.llt.L()
    }

    pub fn solve_mat(&self, rhs: &Mat<f64>) -> Mat<f64> {
        self.llt.solve(rhs)
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let b = col_mat(rhs);
        mat_col(&self.llt.solve(&b), 0)
    }

    /// `L^{-1} z`.
    pub fn whiten(&self, z: &[f64]) -> Vec<f64> {
        let mut b = col_mat(z);
        faer::linalg::triangular_solve::solve_lower_triangular_in_place(self.llt.L(), b.as_mut(), Par::Seq);
        mat_col(&b, 0)
    }

    /// `L^{-T} v`.
    pub fn whiten_transpose(&self, v: &[f64]) -> Vec<f64> {
        let mut b = col_mat(v);
        faer::linalg::triangular_solve::solve_upper_triangular_in_place(self.llt.L().transpose(), b.as_mut(), Par::Seq);
        mat_col(&b, 0)
    }

    /// `L v`.
    pub fn color(&self, v: &[f64]) -> Vec<f64> {
        let l = self.llt.L();
        let n = v.len();
        let mut out = vec![0.0; n];
        for j in 0..n {
            let vj = v[j];
            if vj == 0.0 {
                continue;
            }
            for (i, o) in out.iter_mut().enumerate().skip(j) {
                *o += l[(i, j)] * vj;
            }
        }
        out
    }

    /// `L^T w`.
    pub fn color_transpose(&self, w: &[f64]) -> Vec<f64> {
        let l = self.llt.L();
        let n = w.len();
        (0..n).map(|j| (j..n).map(|i| l[(i, j)] * w[i]).sum()).collect()
    }

    /// `z^T (G + nugget I)^{-1} z`.
    pub fn quad_form(&self, z: &[f64]) -> f64 {
        self.whiten(z).iter().map(|v| v * v).sum()
    }

    /// Relative Frobenius error of `L L^T` against `matrix + nugget I`.
    pub fn reconstruction_error(&self) -> f64 {
        let l = self.llt.L();
        let llt = l * l.transpose();
        let n = self.size();
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..n {
            for i in 0..n {
                let target = self.matrix[(i, j)] + if i == j { self.nugget } else { 0.0 };
                num += (llt[(i, j)] - target).powi(2);
                den += target * target;
            }
        }
        (num / den.max(f64::MIN_POSITIVE)).sqrt()
    }
}

fn check_symmetric(m: MatRef<'_, f64>) -> Result<()> {
    let n = m.nrows();
    let mut scale: f64 = 0.0;
    let mut asym: f64 = 0.0;
    for j in 0..n {
        for i in 0..n {
            scale = scale.max(m[(i, j)].abs());
            if i > j {
                asym = asym.max((m[(i, j)] - m[(j, i)]).abs());
            }
        }
    }
    if !scale.is_finite() {
        return Err(Error::numerical("gram matrix contains non-finite entries"));
    }
    if asym > ASYMMETRY_TOL * scale {
        return Err(Error::invalid(format!(
            "gram matrix is not symmetric (max asymmetry {asym:e}, scale {scale:e})"
        )));
    }
    Ok(())
}

/// Solves `(G + nugget I) w = rhs` by Cholesky with nugget escalation.
pub fn regularized_solve(g: &Mat<f64>, nugget: f64, rhs: &Mat<f64>) -> Result<(Mat<f64>, GramFactorization)> {
    if rhs.nrows() != g.nrows() {
        return Err(Error::invalid(format!(
            "right-hand side has {} rows, system has {}",
            rhs.nrows(),
            g.nrows()
        )));
    }
    let fact = GramFactorization::new(g.clone(), nugget)?;
    let w = fact.solve_mat(rhs);
    Ok((w, fact))
}

/// Vector form of [`regularized_solve`].
pub fn regularized_solve_vec(g: &Mat<f64>, nugget: f64, rhs: &[f64]) -> Result<(Vec<f64>, GramFactorization)> {
    let (w, f) = regularized_solve(g, nugget, &col_mat(rhs))?;
    Ok((mat_col(&w, 0), f))
}

pub(crate) fn col_mat(v: &[f64]) -> Mat<f64> {
    Mat::from_fn(v.len(), 1, |i, _| v[i])
}

pub(crate) fn mat_col(m: &Mat<f64>, j: usize) -> Vec<f64> {
    (0..m.nrows()).map(|i| m[(i, j)]).collect()
}
