//! Kernel collocation solver for a learned equation.
//!
//! The unknowns are the values `z` of a stack of linear functionals applied to
//! the solution. The objective is
//! `z^T G^{-1} z + lambda_P^{-2} |r_P(z)|^2 + lambda_B^{-2} |r_B(z)|^2`
//! where `G` is the Gram matrix of the functionals. Both optimizers work in the
//! whitened variable `v = L^{-1} z` with `G = L L^T`, so the prior term is `|v|^2`.

use std::io::Write;
use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::equation::ScalarField;
use crate::error::{Error, Result};
use crate::gram::{gram, Functional, GramFactorization};
use crate::kernel::{apply_unchecked, check_orders, DiffOp, KernelSpec, MultiIndex};
use crate::points::Points;

pub const DEFAULT_LAMBDA_P: f64 = 1e-3;
pub const DEFAULT_LAMBDA_B: f64 = 1e-7;
pub const DEFAULT_SOLVER_NUGGET: f64 = 1e-10;
pub const DEFAULT_GN_ITERS: usize = 50;
pub const DEFAULT_LBFGS_STEPS: usize = 4000;
const MAX_HALVINGS: usize = 20;
const REL_DECREASE_TOL: f64 = 1e-10;
const LBFGS_HISTORY: usize = 10;

/// A linear functional applied to one solution component at every interior point.
#[derive(Clone, Debug)]
pub struct InteriorOp {
    pub component: usize,
    pub op: DiffOp,
    pub name: String,
}

/// One input slot of an interior equation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    /// Coordinate `axis` of the collocation point.
    Coordinate(usize),
    /// Value of interior op number `k` at the collocation point.
    Op(usize),
}

/// Residual imposed at every interior point.
///
/// With `explicit = Some(k)` the residual is `z_k - model(s) - source`, otherwise
/// it is `model(s) - source`.
#[derive(Clone)]
pub struct InteriorEquation {
    pub model: Arc<dyn ScalarField>,
    pub inputs: Vec<FeatureSource>,
    pub explicit: Option<usize>,
    /// Right-hand side at each interior point.
    pub source: Vec<f64>,
}

impl std::fmt::Debug for InteriorEquation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InteriorEquation")
            .field("inputs", &self.inputs)
            .field("explicit", &self.explicit)
            .finish_non_exhaustive()
    }
}

/// Dirichlet-type data `op(u_component)(x) = data` at every boundary point.
#[derive(Clone, Debug)]
pub struct BoundaryCondition {
    pub component: usize,
    pub op: DiffOp,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct CollocationProblem {
    /// Solution kernel for each component.
    pub kernels: Vec<KernelSpec>,
    pub interior_points: Points,
    pub boundary_points: Points,
    pub interior_ops: Vec<InteriorOp>,
    pub boundary_conditions: Vec<BoundaryCondition>,
    pub equations: Vec<InteriorEquation>,
    pub lambda_p: f64,
    pub lambda_b: f64,
    pub nugget: f64,
}

impl CollocationProblem {
    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() {
            return Err(Error::invalid("a collocation problem needs at least one kernel"));
        }
        let d = self.interior_points.dim();
        if self.kernels.iter().any(|k| k.dim() != d) {
            return Err(Error::invalid("kernel dimension does not match the collocation points"));
        }
        if !self.boundary_points.is_empty() && self.boundary_points.dim() != d {
            return Err(Error::invalid("boundary and interior points have different dimensions"));
        }
        if !(self.lambda_p > 0.0 && self.lambda_b > 0.0) {
            return Err(Error::invalid("penalty weights lambda_P and lambda_B must be positive"));
        }
        if !(self.nugget >= 0.0) {
            return Err(Error::invalid("solver nugget must be non-negative"));
        }
        let zero = MultiIndex::zero(d);
        let m = self.kernels.len();
        for op in &self.interior_ops {
            if op.component >= m {
                return Err(Error::invalid(format!(
                    "interior op '{}' refers to a missing component",
                    op.name
                )));
            }
            for (_, a) in &op.op.terms {
                check_orders(&self.kernels[op.component], a, &zero)?;
            }
        }
        let (ni, nb) = (self.interior_points.len(), self.boundary_points.len());
        for bc in &self.boundary_conditions {
            if bc.component >= m || bc.data.len() != nb {
                return Err(Error::invalid("boundary condition component or data length is wrong"));
            }
        }
        for eq in &self.equations {
            if eq.source.len() != ni {
                return Err(Error::invalid(format!(
                    "equation source has {} values for {ni} interior points",
                    eq.source.len()
                )));
            }
            if eq.inputs.len() != eq.model.input_dim() {
                return Err(Error::invalid(
                    "equation inputs do not match the model's input dimension",
                ));
            }
            for src in eq.inputs.iter().chain(eq.explicit.map(FeatureSource::Op).as_ref()) {
                match *src {
                    FeatureSource::Coordinate(a) if a >= d => {
                        return Err(Error::invalid(format!("coordinate {a} out of range")))
                    }
                    FeatureSource::Op(k) if k >= self.interior_ops.len() => {
                        return Err(Error::invalid(format!("interior op {k} out of range")))
                    }
                    _ => {}
                }
            }
        }
        for b in self.boundary_points.iter() {
            if self.interior_points.iter().any(|x| x == b) {
                return Err(Error::invalid("interior and boundary points must be disjoint"));
            }
        }
        Ok(())
    }

    pub fn num_functionals(&self) -> usize {
        self.interior_points.len() * self.interior_ops.len()
            + self.boundary_points.len() * self.boundary_conditions.len()
    }

    pub fn num_residuals(&self) -> usize {
        self.interior_points.len() * self.equations.len() + self.boundary_points.len() * self.boundary_conditions.len()
    }

    /// Index in `z` of interior op `k` at interior point `j`.
    pub fn interior_slot(&self, j: usize, k: usize) -> usize {
        j * self.interior_ops.len() + k
    }

    /// Index in `z` of boundary condition `k` at boundary point `b`.
    pub fn boundary_slot(&self, b: usize, k: usize) -> usize {
        self.interior_points.len() * self.interior_ops.len() + b * self.boundary_conditions.len() + k
    }
}

/// A functional tagged with the solution component it acts on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentFunctional {
    pub component: usize,
    pub functional: Functional,
}

/// The assembled Gram system of a collocation problem.
///
/// The factorization is shared between clones, so one assembly can serve many
/// right-hand sides by replacing the equation sources.
#[derive(Clone, Debug)]
pub struct Collocation {
    pub problem: CollocationProblem,
    pub functionals: Vec<ComponentFunctional>,
    pub factor: Arc<GramFactorization>,
}

/// Stacks the functionals (interior points by interior ops, then boundary points
/// by boundary conditions) and factorizes their block-diagonal Gram matrix.
pub fn assemble(problem: CollocationProblem) -> Result<Collocation> {
    problem.validate()?;
    let mut functionals = Vec::with_capacity(problem.num_functionals());
    for x in problem.interior_points.iter() {
        for op in &problem.interior_ops {
            functionals.push(ComponentFunctional {
                component: op.component,
                functional: Functional::new(x.to_vec(), op.op.clone()),
            });
        }
    }
    for x in problem.boundary_points.iter() {
        for bc in &problem.boundary_conditions {
            functionals.push(ComponentFunctional {
                component: bc.component,
                functional: Functional::new(x.to_vec(), bc.op.clone()),
            });
        }
    }
    let n = functionals.len();
    if n == 0 {
        return Err(Error::invalid("collocation problem has no functionals"));
    }
    let mut g = Mat::<f64>::zeros(n, n);
    for (c, kernel) in problem.kernels.iter().enumerate() {
        let idx: Vec<usize> = (0..n).filter(|&i| functionals[i].component == c).collect();
        if idx.is_empty() {
            continue;
        }
        let fs: Vec<Functional> = idx.iter().map(|&i| functionals[i].functional.clone()).collect();
        let block = gram(kernel, &fs, &fs)?;
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                g[(i, j)] = block[(a, b)];
            }
        }
    }
    let factor = GramFactorization::new(g, problem.nugget).map_err(|e| e.in_stage("assemble"))?;
    Ok(Collocation {
        problem,
        functionals,
        factor: Arc::new(factor),
    })
}

/// One row of a solver trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverState {
    pub z: Vec<f64>,
    pub objective: f64,
    pub iteration: usize,
    pub converged: bool,
    pub trace: Vec<TraceRow>,
}

impl SolverState {
    pub fn write_trace_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iteration,objective,step")?;
        for r in &self.trace {
            writeln!(w, "{},{:.17e},{}", r.iteration, r.objective, r.step)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussNewtonOptions {
    pub iters: usize,
    pub line_search: bool,
}

impl Default for GaussNewtonOptions {
    fn default() -> Self {
        Self {
            iters: DEFAULT_GN_ITERS,
            line_search: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LbfgsOptions {
    pub steps: usize,
    pub step_size: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            steps: DEFAULT_LBFGS_STEPS,
            step_size: 0.5,
        }
    }
}

/// Sparse Jacobian row: `(column, value)` pairs.
type SparseRow = Vec<(usize, f64)>;

impl Collocation {
    /// Replaces the right-hand side of every interior equation.
    pub fn set_sources(&mut self, sources: Vec<Vec<f64>>) -> Result<()> {
        let p = &mut self.problem;
        if sources.len() != p.equations.len() || sources.iter().any(|s| s.len() != p.interior_points.len()) {
            return Err(Error::invalid("sources do not match the equations and interior points"));
        }
        for (eq, s) in p.equations.iter_mut().zip(sources) {
            eq.source = s;
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.functionals.len()
    }

    fn residual_weights(&self) -> Vec<f64> {
        let p = &self.problem;
        let ni = p.interior_points.len() * p.equations.len();
        let nb = p.boundary_points.len() * p.boundary_conditions.len();
        let wp = 1.0 / (p.lambda_p * p.lambda_p);
        let wb = 1.0 / (p.lambda_b * p.lambda_b);
        std::iter::repeat_n(wp, ni).chain(std::iter::repeat_n(wb, nb)).collect()
    }

    fn features(&self, eq: &InteriorEquation, j: usize, z: &[f64], s: &mut Vec<f64>) {
        let p = &self.problem;
        s.clear();
        for src in &eq.inputs {
            s.push(match *src {
                FeatureSource::Coordinate(a) => p.interior_points.row(j)[a],
                FeatureSource::Op(k) => z[p.interior_slot(j, k)],
            });
        }
    }

    /// Residual vector, ordered by equation then interior point, then boundary
    /// point by condition.
    pub fn residuals(&self, z: &[f64]) -> Vec<f64> {
        let p = &self.problem;
        let mut r = Vec::with_capacity(p.num_residuals());
        let mut s = Vec::new();
        for eq in &p.equations {
            for j in 0..p.interior_points.len() {
                self.features(eq, j, z, &mut s);
                let m = eq.model.value(&s);
                r.push(match eq.explicit {
                    Some(k) => z[p.interior_slot(j, k)] - m - eq.source[j],
                    None => m - eq.source[j],
                });
            }
        }
        for b in 0..p.boundary_points.len() {
            for (k, bc) in p.boundary_conditions.iter().enumerate() {
                r.push(z[p.boundary_slot(b, k)] - bc.data[b]);
            }
        }
        r
    }

    /// Residuals and their sparse Jacobian with respect to `z`.
    fn linearize(&self, z: &[f64]) -> (Vec<f64>, Vec<SparseRow>) {
        let p = &self.problem;
        let mut r = Vec::with_capacity(p.num_residuals());
        let mut jac = Vec::with_capacity(p.num_residuals());
        let mut s = Vec::new();
        for eq in &p.equations {
            let mut g = vec![0.0; eq.inputs.len()];
            for j in 0..p.interior_points.len() {
                self.features(eq, j, z, &mut s);
                let m = eq.model.value(&s);
                eq.model.gradient(&s, &mut g);
                let sign = if eq.explicit.is_some() { -1.0 } else { 1.0 };
                let mut row: SparseRow = Vec::with_capacity(eq.inputs.len() + 1);
                for (src, gi) in eq.inputs.iter().zip(&g) {
                    if let FeatureSource::Op(k) = *src {
                        row.push((p.interior_slot(j, k), sign * gi));
                    }
                }
                r.push(match eq.explicit {
                    Some(k) => {
                        row.push((p.interior_slot(j, k), 1.0));
                        z[p.interior_slot(j, k)] - m - eq.source[j]
                    }
                    None => m - eq.source[j],
                });
                jac.push(row);
            }
        }
        for b in 0..p.boundary_points.len() {
            for (k, bc) in p.boundary_conditions.iter().enumerate() {
                let slot = p.boundary_slot(b, k);
                r.push(z[slot] - bc.data[b]);
                jac.push(vec![(slot, 1.0)]);
            }
        }
        (r, jac)
    }

    /// Full objective `z^T G^{-1} z + sum_r w_r r_r(z)^2`.
    pub fn objective(&self, z: &[f64]) -> f64 {
        let v = self.factor.whiten(z);
        self.objective_whitened(&v, z)
    }

    fn objective_whitened(&self, v: &[f64], z: &[f64]) -> f64 {
        let prior: f64 = v.iter().map(|x| x * x).sum();
        let w = self.residual_weights();
        let pen: f64 = self.residuals(z).iter().zip(&w).map(|(r, w)| w * r * r).sum();
        prior + pen
    }

    /// Gradient of [`Collocation::objective`] with respect to `z`.
    pub fn objective_gradient(&self, z: &[f64]) -> Vec<f64> {
        let (r, jac) = self.linearize(z);
        let w = self.residual_weights();
        let mut g = self.factor.solve(z);
        g.iter_mut().for_each(|x| *x *= 2.0);
        for ((ri, row), wi) in r.iter().zip(&jac).zip(&w) {
            for &(c, val) in row {
                g[c] += 2.0 * wi * ri * val;
            }
        }
        g
    }

    /// Objective and gradient in the whitened variable.
    fn whitened_eval(&self, v: &[f64], w: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let z = self.factor.color(v);
        let (r, jac) = self.linearize(&z);
        let mut obj: f64 = v.iter().map(|x| x * x).sum();
        let mut gz = vec![0.0; z.len()];
        for ((ri, row), wi) in r.iter().zip(&jac).zip(w) {
            obj += wi * ri * ri;
            for &(c, val) in row {
                gz[c] += 2.0 * wi * ri * val;
            }
        }
        let mut gv = self.factor.color_transpose(&gz);
        for (g, x) in gv.iter_mut().zip(v) {
            *g += 2.0 * x;
        }
        (obj, gv, z)
    }

    fn check_init(&self, init: Option<&[f64]>) -> Result<Vec<f64>> {
        let n = self.size();
        match init {
            None => Ok(vec![0.0; n]),
            Some(z) if z.len() == n => Ok(z.to_vec()),
            Some(z) => Err(Error::invalid(format!(
                "initial guess has length {}, expected {n}",
                z.len()
            ))),
        }
    }

    /// Gauss-Newton on the reduced objective with step-halving line search.
    pub fn gauss_newton(&self, init: Option<&[f64]>, opts: GaussNewtonOptions) -> Result<SolverState> {
        let z0 = self.check_init(init)?;
        let w = self.residual_weights();
        let sqrt_w: Vec<f64> = w.iter().map(|x| x.sqrt()).collect();
        let l = self.factor.lower();
        let n = self.size();

        let mut v = self.factor.whiten(&z0);
        let mut z = self.factor.color(&v);
        let mut obj = self.objective_whitened(&v, &z);
        if !obj.is_finite() {
            return Err(Error::numerical("objective is not finite at the initial guess"));
        }
        let mut trace = vec![TraceRow {
            iteration: 0,
            objective: obj,
            step: 0.0,
        }];
        let mut converged = false;
        let mut iteration = 0;
        for it in 1..=opts.iters {
            iteration = it;
            let (r, jac) = self.linearize(&z);
            let m = r.len();
            // A = W^{1/2} J L, b = W^{1/2} (J z - r)
            let mut a = Mat::<f64>::zeros(m, n);
            let mut b = vec![0.0; m];
            for (i, row) in jac.iter().enumerate() {
                let mut jz = 0.0;
                for &(c, val) in row {
                    jz += val * z[c];
                    let s = sqrt_w[i] * val;
                    for col in 0..=c {
                        a[(i, col)] += s * l[(c, col)];
                    }
                }
                b[i] = sqrt_w[i] * (jz - r[i]);
            }
            // v_new = A^T (A A^T + I)^{-1} b
            let mut aat = a.as_ref() * a.as_ref().transpose();
            for i in 0..m {
                aat[(i, i)] += 1.0;
            }
            let llt = aat
                .llt(Side::Lower)
                .map_err(|_| Error::numerical("Gauss-Newton normal matrix is not positive definite"))?;
            let y = llt.solve(Mat::from_fn(m, 1, |i, _| b[i]));
            let v_new: Vec<f64> = (0..n).map(|c| (0..m).map(|i| a[(i, c)] * y[(i, 0)]).sum()).collect();

            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let cand: Vec<f64> = v.iter().zip(&v_new).map(|(a, b)| a + step * (b - a)).collect();
                let zc = self.factor.color(&cand);
                let oc = self.objective_whitened(&cand, &zc);
                if !opts.line_search || (oc.is_finite() && oc <= obj) {
                    accepted = Some((cand, zc, oc));
                    break;
                }
                step *= 0.5;
            }
            let Some((vc, zc, oc)) = accepted else {
                trace.push(TraceRow {
                    iteration: it,
                    objective: obj,
                    step: 0.0,
                });
                break;
            };
            if !oc.is_finite() {
                return Err(Error::numerical(format!(
                    "objective became non-finite at iteration {it}"
                )));
            }
            let decrease = (obj - oc) / obj.abs().max(f64::MIN_POSITIVE);
            v = vc;
            z = zc;
            obj = oc;
            trace.push(TraceRow {
                iteration: it,
                objective: obj,
                step,
            });
            if decrease.abs() < REL_DECREASE_TOL {
                converged = true;
                break;
            }
        }
        Ok(SolverState {
            z,
            objective: obj,
            iteration,
            converged,
            trace,
        })
    }

    /// Limited-memory BFGS on the reduced objective in whitened coordinates.
    pub fn lbfgs(&self, init: Option<&[f64]>, opts: LbfgsOptions) -> Result<SolverState> {
        if !(opts.step_size > 0.0) {
            return Err(Error::invalid("L-BFGS step size must be positive"));
        }
        let z0 = self.check_init(init)?;
        let w = self.residual_weights();
        let mut v = self.factor.whiten(&z0);
        let (mut obj, mut g, mut z) = self.whitened_eval(&v, &w);
        if !obj.is_finite() {
            return Err(Error::numerical("objective is not finite at the initial guess"));
        }
        let mut trace = vec![TraceRow {
            iteration: 0,
            objective: obj,
            step: 0.0,
        }];
        let mut hist: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = Default::default();
        let mut converged = false;
        let mut iteration = 0;
        let mut failures = 0;
        for it in 1..=opts.steps {
            iteration = it;
            let gnorm = dot(&g, &g).sqrt();
            if gnorm <= 1e-12 * (1.0 + obj.abs()) {
                converged = true;
                break;
            }
            // two-loop recursion
            let mut q = g.clone();
            let mut alphas = Vec::with_capacity(hist.len());
            for (s, y, rho) in hist.iter().rev() {
                let a = rho * dot(s, &q);
                axpy(-a, y, &mut q);
                alphas.push(a);
            }
            let gamma = match hist.back() {
                Some((s, y, _)) => dot(s, y) / dot(y, y),
                None => 1.0 / gnorm,
            };
            q.iter_mut().for_each(|x| *x *= gamma);
            for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
                let b = rho * dot(y, &q);
                axpy(a - b, s, &mut q);
            }
            let mut dir: Vec<f64> = q.iter().map(|x| -x).collect();
            let mut slope = dot(&g, &dir);
            if !(slope < 0.0) {
                hist.clear();
                dir = g.iter().map(|x| -x / gnorm).collect();
                slope = -gnorm;
            }

            let mut step = if hist.is_empty() { opts.step_size } else { 1.0 };
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let cand: Vec<f64> = v.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
                let (oc, gc, zc) = self.whitened_eval(&cand, &w);
                if oc.is_finite() && oc <= obj + 1e-4 * step * slope {
                    accepted = Some((cand, oc, gc, zc));
                    break;
                }
                step *= 0.5;
            }
            let Some((vc, oc, gc, zc)) = accepted else {
                failures += 1;
                hist.clear();
                if failures >= 2 {
                    break;
                }
                continue;
            };
            failures = 0;
            let s: Vec<f64> = vc.iter().zip(&v).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = gc.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-16 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
                if hist.len() == LBFGS_HISTORY {
                    hist.pop_front();
                }
                hist.push_back((s, y, 1.0 / sy));
            }
            let decrease = (obj - oc) / obj.abs().max(f64::MIN_POSITIVE);
            v = vc;
            g = gc;
            z = zc;
            obj = oc;
            trace.push(TraceRow {
                iteration: it,
                objective: obj,
                step,
            });
            if (0.0..1e-15).contains(&decrease) && hist.len() == LBFGS_HISTORY {
                converged = true;
                break;
            }
        }
        Ok(SolverState {
            z,
            objective: obj,
            iteration,
            converged,
            trace,
        })
    }

    /// Representer-formula reconstruction from a solver state.
    pub fn reconstruct(&self, state: &SolverState) -> Result<PredictedSolution> {
        if state.z.len() != self.size() {
            return Err(Error::invalid("solver state does not belong to this problem"));
        }
        let coefficients = self.factor.solve(&state.z);
        Ok(PredictedSolution {
            kernels: self.problem.kernels.clone(),
            functionals: self.functionals.clone(),
            coefficients,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `u_hat(x) = K(x, phi) K(phi, phi)^{-1} z_hat`, one expansion per component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedSolution {
    pub kernels: Vec<KernelSpec>,
    pub functionals: Vec<ComponentFunctional>,
    pub coefficients: Vec<f64>,
}

impl PredictedSolution {
    /// `op(u_hat_component)(x)`.
    pub fn eval_op(&self, component: usize, op: &DiffOp, x: &[f64]) -> Result<f64> {
        let kernel = self
            .kernels
            .get(component)
            .ok_or_else(|| Error::invalid(format!("no component {component}")))?;
        if x.len() != kernel.dim() {
            return Err(Error::invalid("evaluation point has the wrong dimension"));
        }
        let zero = MultiIndex::zero(x.len());
        for (_, a) in &op.terms {
            check_orders(kernel, a, &zero)?;
        }
        Ok(self
            .functionals
            .iter()
            .zip(&self.coefficients)
            .filter(|(f, _)| f.component == component)
            .map(|(f, c)| c * apply_unchecked(kernel, op, &f.functional.op, x, &f.functional.point))
            .sum())
    }

    pub fn value(&self, component: usize, x: &[f64]) -> Result<f64> {
        self.eval_op(component, &DiffOp::value(x.len()), x)
    }

    /// Values of one component on a point set.
    pub fn values_on(&self, component: usize, points: &Points) -> Result<Vec<f64>> {
        points.iter().map(|x| self.value(component, x)).collect()
    }
}

/// Convenience wrapper: assemble, run Gauss-Newton, reconstruct.
pub fn gauss_newton_solve(
    problem: CollocationProblem,
    init: Option<&[f64]>,
    iters: usize,
) -> Result<(Collocation, SolverState)> {
    let sys = assemble(problem)?;
    let state = sys.gauss_newton(
        init,
        GaussNewtonOptions {
            iters,
            line_search: true,
        },
    )?;
    Ok((sys, state))
}

/// Convenience wrapper: assemble and run L-BFGS.
pub fn lbfgs_solve(
    problem: CollocationProblem,
    init: Option<&[f64]>,
    steps: usize,
    step_size: f64,
) -> Result<(Collocation, SolverState)> {
    let sys = assemble(problem)?;
    let state = sys.lbfgs(init, LbfgsOptions { steps, step_size })?;
    Ok((sys, state))
}

/// Reconstruction from an assembled system and a state.
pub fn reconstruct(sys: &Collocation, state: &SolverState) -> Result<PredictedSolution> {
    sys.reconstruct(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equation::FnField;

    /// `-u'' = f` on (0, 1) with zero boundary values; linear residuals.
    fn poisson_1d(n: usize, lambda_p: f64) -> CollocationProblem {
        let xs: Vec<f64> = (1..n).map(|i| i as f64 / n as f64).collect();
        let f: Vec<f64> = xs
            .iter()
            .map(|x| std::f64::consts::PI.powi(2) * (std::f64::consts::PI * x).sin())
            .collect();
        let model = Arc::new(FnField::new(1, |s| -s[0], |_, g| g[0] = -1.0));
        CollocationProblem {
            kernels: vec![KernelSpec::gaussian(0.2, 1).unwrap()],
            interior_points: Points::from_scalars(&xs),
            boundary_points: Points::from_scalars(&[0.0, 1.0]),
            interior_ops: vec![
                InteriorOp {
                    component: 0,
                    op: DiffOp::value(1),
                    name: "u".into(),
                },
                InteriorOp {
                    component: 0,
                    op: DiffOp::second(1, 0),
                    name: "u_xx".into(),
                },
            ],
            boundary_conditions: vec![BoundaryCondition {
                component: 0,
                op: DiffOp::value(1),
                data: vec![0.0, 0.0],
            }],
            equations: vec![InteriorEquation {
                model,
                inputs: vec![FeatureSource::Op(1)],
                explicit: None,
                source: f,
            }],
            lambda_p,
            lambda_b: lambda_p,
            nugget: 1e-10,
        }
    }

    #[test]
    fn single_functional() {
        let p = CollocationProblem {
            kernels: vec![KernelSpec::gaussian(0.5, 1).unwrap()],
            interior_points: Points::from_scalars(&[0.3]),
            boundary_points: Points::empty(1),
            interior_ops: vec![InteriorOp {
                component: 0,
                op: DiffOp::value(1),
                name: "u".into(),
            }],
            boundary_conditions: vec![],
            equations: vec![],
            lambda_p: 1.0,
            lambda_b: 1.0,
            nugget: 0.0,
        };
        let sys = assemble(p).unwrap();
        assert_eq!(sys.size(), 1);
        let state = SolverState {
            z: vec![1.0],
            objective: 0.0,
            iteration: 0,
            converged: true,
            trace: vec![],
        };
        let u = sys.reconstruct(&state).unwrap();
        assert!((u.value(0, &[0.3]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_problem_converges_in_one_step() {
        let sys = assemble(poisson_1d(20, 1e-6)).unwrap();
        let s = sys
            .gauss_newton(
                None,
                GaussNewtonOptions {
                    iters: 5,
                    line_search: true,
                },
            )
            .unwrap();
        assert!(s.converged);
        let first = s.trace[1].objective;
        assert!((first - s.objective).abs() <= 1e-9 * s.objective);
        let u = sys.reconstruct(&s).unwrap();
        for x in [0.25, 0.5, 0.8] {
            let e = (u.value(0, &[x]).unwrap() - (std::f64::consts::PI * x).sin()).abs();
            assert!(e < 1e-3, "error {e} at {x}");
        }
    }

    #[test]
    fn objective_gradient_matches_differences() {
        let sys = assemble(poisson_1d(6, 1e-1)).unwrap();
        let z: Vec<f64> = (0..sys.size()).map(|i| (i as f64 * 0.7).sin()).collect();
        let g = sys.objective_gradient(&z);
        for i in [0, 3, 7, sys.size() - 1] {
            let h = 1e-6 * (1.0 + z[i].abs());
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += h;
            zm[i] -= h;
            let fd = (sys.objective(&zp) - sys.objective(&zm)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(1.0), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn lbfgs_matches_gauss_newton_on_quadratic() {
        let sys = assemble(poisson_1d(4, 1e-1)).unwrap();
        let gn = sys.gauss_newton(None, GaussNewtonOptions::default()).unwrap();
        let lb = sys
            .lbfgs(
                None,
                LbfgsOptions {
                    steps: 200,
                    step_size: 0.5,
                },
            )
            .unwrap();
        assert!(
            (lb.objective - gn.objective).abs() <= 1e-8 * gn.objective,
            "{} vs {}",
            lb.objective,
            gn.objective
        );
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let mut p = poisson_1d(5, 1e-3);
        p.equations[0].source.iter_mut().for_each(|f| *f = 0.0);
        let sys = assemble(p).unwrap();
        let s = sys.lbfgs(None, LbfgsOptions::default()).unwrap();
        assert_eq!(s.objective, 0.0);
        assert!(s.z.iter().all(|z| *z == 0.0));
    }

    #[test]
    fn overlapping_points_rejected() {
        let mut p = poisson_1d(4, 1e-3);
        p.boundary_points = Points::from_scalars(&[0.25, 1.0]);
        assert!(matches!(assemble(p), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn trace_csv_has_header() {
        let sys = assemble(poisson_1d(4, 1e-2)).unwrap();
        let s = sys.gauss_newton(None, GaussNewtonOptions::default()).unwrap();
        let mut buf = Vec::new();
        s.write_trace_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,objective,step\n"));
        assert_eq!(text.lines().count(), s.trace.len() + 1);
    }
}
