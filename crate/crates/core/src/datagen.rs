//! Training and test data: GP-sampled sources, reference solvers for the three
//! benchmarks, subsampling to observation grids and noise injection.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gram::{kernel_matrix, GramFactorization};
use crate::kernel::KernelSpec;
use crate::points::Points;
use crate::problems::{darcy_coefficient, ProblemId, DIFFUSION_COEFF, PENDULUM_STIFFNESS, REACTION_COEFF};

/// Jitter added to the GP covariance before factorization.
pub const GP_JITTER: f64 = 1e-10;
pub const GP_LENGTHSCALE: f64 = 0.2;
/// Number of nodes on [0, 1] at which a GP source is drawn before interpolation.
pub const GP_NODES: usize = 101;
/// Stream offset separating test draws from training draws.
pub const TEST_STREAM_OFFSET: u64 = 1 << 32;
/// Stream offset for observation noise.
const NOISE_STREAM_OFFSET: u64 = 1 << 40;

/// A scalar function of one variable.
pub type Forcing = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Deterministic generator for stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws a zero-mean Gaussian vector with covariance `K(grid, grid) + GP_JITTER I`.
pub fn sample_gp_source(lengthscale: f64, grid: &Points, seed: u64) -> Result<Vec<f64>> {
    let mut rng = stream_rng(seed, 0);
    Ok(gp_draw(lengthscale, grid, &mut rng)?.0)
}

/// Returns the draw and the whitened-to-weights vector `L^{-T} xi`.
fn gp_draw(lengthscale: f64, grid: &Points, rng: &mut ChaCha20Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(lengthscale > 0.0) {
        return Err(Error::invalid(format!("GP lengthscale must be > 0, got {lengthscale}")));
    }
    let kernel = KernelSpec::gaussian(lengthscale, grid.dim())?;
    let k = kernel_matrix(&kernel, grid, grid)?;
    let factor = GramFactorization::new(k, GP_JITTER).map_err(|e| e.in_stage("gp sampling"))?;
    let xi: Vec<f64> = (0..grid.len()).map(|_| StandardNormal.sample(rng)).collect();
    let draw = factor.color(&xi);
    let weights = factor.whiten_transpose(&xi);
    Ok((draw, weights))
}

/// A GP sample path on [0, 1], drawn on [`GP_NODES`] nodes and extended to the
/// whole interval by the kernel interpolant through those values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpSource {
    pub lengthscale: f64,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GpSource {
    pub fn sample(lengthscale: f64, rng: &mut ChaCha20Rng) -> Result<Self> {
        let nodes: Vec<f64> = (0..GP_NODES).map(|i| i as f64 / (GP_NODES - 1) as f64).collect();
        let (_, weights) = gp_draw(lengthscale, &Points::from_scalars(&nodes), rng)?;
        Ok(Self {
            lengthscale,
            nodes,
            weights,
        })
    }

    pub fn eval(&self, t: f64) -> f64 {
        let inv = 0.5 / (self.lengthscale * self.lengthscale);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(n, w)| w * (-(t - n) * (t - n) * inv).exp())
            .sum()
    }

    pub fn as_forcing(&self) -> Forcing {
        let s = self.clone();
        Arc::new(move |t| s.eval(t))
    }
}

/// `t -> f(t) + beta sin(5 pi t)`.
pub fn perturb_forcing(f: Forcing, beta: f64) -> Forcing {
    if beta == 0.0 {
        return f;
    }
    Arc::new(move |t| f(t) + beta * (5.0 * PI * t).sin())
}

/// Adds i.i.d. Gaussian noise with standard deviation `ratio * RMS(values)`.
pub fn add_noise(values: &[f64], ratio: f64, rng: &mut ChaCha20Rng) -> Result<Vec<f64>> {
    if !(ratio >= 0.0) {
        return Err(Error::invalid(format!("noise ratio must be >= 0, got {ratio}")));
    }
    if ratio == 0.0 || values.is_empty() {
        return Ok(values.to_vec());
    }
    let rms = (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt();
    let std = ratio * rms;
    Ok(values
        .iter()
        .map(|v| {
            let e: f64 = StandardNormal.sample(rng);
            v + std * e
        })
        .collect())
}

/// Seeded form of [`add_noise`].
pub fn add_noise_seeded(values: &[f64], ratio: f64, seed: u64) -> Result<Vec<f64>> {
    add_noise(values, ratio, &mut stream_rng(seed, NOISE_STREAM_OFFSET))
}

/// One axis of a uniform tensor grid, `n` nodes from `lo` to `hi` inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn unit(n: usize) -> Self {
        Self { lo: 0.0, hi: 1.0, n }
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.n {
            self.hi
        } else {
            self.lo + i as f64 * self.step()
        }
    }

    /// Index of the node at `x`, if `x` is a node.
    pub fn locate(&self, x: f64) -> Option<usize> {
        let h = self.step();
        let r = (x - self.lo) / h;
        let i = r.round();
        if i < 0.0 || i as usize >= self.n || (r - i).abs() > 1e-8 {
            None
        } else {
            Some(i as usize)
        }
    }
}

/// Uniform tensor grid; the first axis varies slowest in the flat ordering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformGrid {
    pub axes: Vec<Axis>,
}

impl UniformGrid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() || axes.iter().any(|a| a.n < 2 || !(a.hi > a.lo)) {
            return Err(Error::invalid("grid axes need at least two nodes and hi > lo"));
        }
        Ok(Self { axes })
    }

    pub fn unit_square(n: usize) -> Result<Self> {
        Self::new(vec![Axis::unit(n), Axis::unit(n)])
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.n).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.axes).fold(0, |acc, (i, a)| acc * a.n + i)
    }

    pub fn points(&self) -> Points {
        let mut out = Points::empty(self.dim());
        let mut idx = vec![0usize; self.dim()];
        let mut x = vec![0.0; self.dim()];
        for _ in 0..self.len() {
            for (k, a) in self.axes.iter().enumerate() {
                x[k] = a.node(idx[k]);
            }
            out.push(&x).expect("grid dimension");
            for k in (0..self.dim()).rev() {
                idx[k] += 1;
                if idx[k] < self.axes[k].n {
                    break;
                }
                idx[k] = 0;
            }
        }
        out
    }
}

/// Extracts the values of a fine-grid field at the coarse points, which must be
/// nodes of the fine grid.
pub fn subsample(fine: &UniformGrid, values: &[f64], coarse: &Points) -> Result<Vec<f64>> {
    if values.len() != fine.len() {
        return Err(Error::invalid("field length does not match the fine grid"));
    }
    if coarse.dim() != fine.dim() {
        return Err(Error::invalid("coarse and fine grids have different dimensions"));
    }
    let mut idx = vec![0; fine.dim()];
    coarse
        .iter()
        .map(|x| {
            for (k, a) in fine.axes.iter().enumerate() {
                idx[k] = a
                    .locate(x[k])
                    .ok_or_else(|| Error::invalid(format!("point {x:?} is not a node of the fine grid")))?;
            }
            Ok(values[fine.flat_index(&idx)])
        })
        .collect()
}

/// A pendulum trajectory on a uniform time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
}

/// Classical RK4 for `u1' = u2, u2' = -k sin(u1) + f(t)` from rest.
pub fn solve_pendulum_reference(f: &dyn Fn(f64) -> f64, k: f64, t_end: f64, fine_steps: usize) -> Result<Trajectory> {
    if fine_steps < 1000 {
        return Err(Error::invalid(format!("need at least 1000 steps, got {fine_steps}")));
    }
    let h = t_end / fine_steps as f64;
    let rhs = |t: f64, a: f64, b: f64| (b, -k * a.sin() + f(t));
    let mut t = Vec::with_capacity(fine_steps + 1);
    let mut u1 = Vec::with_capacity(fine_steps + 1);
    let mut u2 = Vec::with_capacity(fine_steps + 1);
    let (mut a, mut b) = (0.0f64, 0.0f64);
    t.push(0.0);
    u1.push(a);
    u2.push(b);
    for n in 0..fine_steps {
        let tn = n as f64 * h;
        let k1 = rhs(tn, a, b);
        let k2 = rhs(tn + 0.5 * h, a + 0.5 * h * k1.0, b + 0.5 * h * k1.1);
        let k3 = rhs(tn + 0.5 * h, a + 0.5 * h * k2.0, b + 0.5 * h * k2.1);
        let k4 = rhs(tn + h, a + h * k3.0, b + h * k3.1);
        a += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        b += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        if !(a.is_finite() && b.is_finite()) {
            return Err(Error::numerical(format!(
                "pendulum state became non-finite at step {n}"
            )));
        }
        t.push(if n + 1 == fine_steps { t_end } else { (n + 1) as f64 * h });
        u1.push(a);
        u2.push(b);
    }
    Ok(Trajectory { t, u1, u2 })
}

/// Solves a tridiagonal system with constant off-diagonals in place (Thomas algorithm).
fn solve_tridiagonal(lower: f64, diag: f64, upper: f64, rhs: &mut [f64], work: &mut [f64]) {
    let n = rhs.len();
    if n == 0 {
        return;
    }
    let mut beta = diag;
    rhs[0] /= beta;
    for i in 1..n {
        work[i] = upper / beta;
        beta = diag - lower * work[i];
        rhs[i] = (rhs[i] - lower * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= work[i + 1] * rhs[i + 1];
    }
}

/// `u_t = 0.01 u_xx + 0.01 u^2 + f(x)` on (0, 1) x (0, 1] with zero boundary and
/// initial data. Crank-Nicolson for diffusion; the reaction and source are
/// explicit, with a predictor-corrector average of the reaction term.
///
/// Returns values on the `nx` by `nt` grid over (x, t), x varying slowest.
pub fn solve_diffusion_reference(f: &dyn Fn(f64) -> f64, nx: usize, nt: usize) -> Result<Vec<f64>> {
    solve_diffusion_with(&|x, _| f(x), nx, nt)
}

/// As [`solve_diffusion_reference`] with a space-time source.
pub fn solve_diffusion_with(f: &dyn Fn(f64, f64) -> f64, nx: usize, nt: usize) -> Result<Vec<f64>> {
    if nx < 100 || nt < 100 {
        return Err(Error::invalid(format!(
            "diffusion grid must be at least 100x100, got {nx}x{nt}"
        )));
    }
    let dx = 1.0 / (nx - 1) as f64;
    let dt = 1.0 / (nt - 1) as f64;
    let m = nx - 2;
    let r = DIFFUSION_COEFF * dt / (dx * dx);
    let xs: Vec<f64> = (1..=m).map(|i| i as f64 * dx).collect();
    // time-major storage while stepping
    let mut hist = vec![0.0; nt * nx];
    let mut u = vec![0.0; m];
    let mut rhs = vec![0.0; m];
    let mut pred = vec![0.0; m];
    let mut work = vec![0.0; m];
    let cn_rhs = |u: &[f64], i: usize| {
        let left = if i == 0 { 0.0 } else { u[i - 1] };
        let right = if i + 1 == m { 0.0 } else { u[i + 1] };
        u[i] + 0.5 * r * (left - 2.0 * u[i] + right)
    };
    for n in 0..nt - 1 {
        let (t0, t1) = (n as f64 * dt, (n + 1) as f64 * dt);
        for i in 0..m {
            let src = 0.5 * (f(xs[i], t0) + f(xs[i], t1));
            rhs[i] = cn_rhs(&u, i) + dt * (REACTION_COEFF * u[i] * u[i] + src);
        }
        pred.copy_from_slice(&rhs);
        solve_tridiagonal(-0.5 * r, 1.0 + r, -0.5 * r, &mut pred, &mut work);
        for i in 0..m {
            let src = 0.5 * (f(xs[i], t0) + f(xs[i], t1));
            let react = 0.5 * REACTION_COEFF * (u[i] * u[i] + pred[i] * pred[i]);
            rhs[i] = cn_rhs(&u, i) + dt * (react + src);
        }
        solve_tridiagonal(-0.5 * r, 1.0 + r, -0.5 * r, &mut rhs, &mut work);
        u.copy_from_slice(&rhs);
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "diffusion solution became non-finite at step {n}"
            )));
        }
        hist[(n + 1) * nx + 1..(n + 1) * nx + 1 + m].copy_from_slice(&u);
    }
    // transpose to x-major
    let mut out = vec![0.0; nx * nt];
    for n in 0..nt {
        for i in 0..nx {
            out[i * nt + n] = hist[n * nx + i];
        }
    }
    Ok(out)
}

/// Finite-volume discretization of `-div(a grad u) = f` on the unit square with
/// zero Dirichlet data, factorized once and reused for many sources.
pub struct DarcySolver {
    n: usize,
    llt: faer::sparse::linalg::solvers::Llt<usize, f64>,
}

impl std::fmt::Debug for DarcySolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DarcySolver").field("n", &self.n).finish()
    }
}

impl DarcySolver {
    /// `n` nodes per side including the boundary.
    pub fn new(n: usize) -> Result<Self> {
        Self::with_coefficient(n, &darcy_coefficient)
    }

    pub fn with_coefficient(n: usize, a: &dyn Fn(&[f64]) -> f64) -> Result<Self> {
        if n < 101 {
            return Err(Error::invalid(format!(
                "Darcy grid needs at least 101 nodes per side, got {n}"
            )));
        }
        let h = 1.0 / (n - 1) as f64;
        let m = n - 2;
        let node_a = |i: usize, j: usize| a(&[i as f64 * h, j as f64 * h]);
        let face = |a1: f64, a2: f64| 2.0 * a1 * a2 / (a1 + a2);
        let id = |i: usize, j: usize| (i - 1) * m + (j - 1);
        let mut trip = Vec::with_capacity(5 * m * m);
        for i in 1..=m {
            for j in 1..=m {
                let ac = node_a(i, j);
                let mut diag = 0.0;
                for (ni, nj) in [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)] {
                    let c = face(ac, node_a(ni, nj)) / (h * h);
                    diag += c;
                    let interior = (1..=m).contains(&ni) && (1..=m).contains(&nj);
                    if interior && id(ni, nj) < id(i, j) {
                        trip.push(Triplet::new(id(i, j), id(ni, nj), -c));
                    }
                }
                trip.push(Triplet::new(id(i, j), id(i, j), diag));
            }
        }
        let mat = SparseColMat::<usize, f64>::try_new_from_triplets(m * m, m * m, &trip)
            .map_err(|e| Error::numerical(format!("could not build the Darcy matrix: {e:?}")))?;
        let llt = mat
            .sp_cholesky(Side::Lower)
            .map_err(|e| Error::numerical(format!("Darcy system is singular: {e:?}")))?;
        Ok(Self { n, llt })
    }

    pub fn grid(&self) -> UniformGrid {
        UniformGrid::unit_square(self.n).expect("n >= 101")
    }

    /// Solution on the full `n` by `n` grid (x1 varying slowest), boundary included.
    pub fn solve(&self, f: &dyn Fn(&[f64]) -> f64) -> Result<Vec<f64>> {
        let n = self.n;
        let m = n - 2;
        let h = 1.0 / (n - 1) as f64;
        let rhs = Mat::from_fn(m * m, 1, |k, _| {
            let (i, j) = (k / m + 1, k % m + 1);
            f(&[i as f64 * h, j as f64 * h])
        });
        let sol = self.llt.solve(&rhs);
        let mut out = vec![0.0; n * n];
        for k in 0..m * m {
            let (i, j) = (k / m + 1, k % m + 1);
            let v = sol[(k, 0)];
            if !v.is_finite() {
                return Err(Error::numerical("Darcy solve produced non-finite values"));
            }
            out[i * n + j] = v;
        }
        Ok(out)
    }
}

/// Darcy reference solve for a single source.
pub fn solve_darcy_reference(f: &dyn Fn(&[f64]) -> f64, n: usize) -> Result<Vec<f64>> {
    DarcySolver::new(n)?.solve(f)
}

/// Resolution and model settings for data generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSettings {
    pub pendulum_k: f64,
    pub pendulum_t_end: f64,
    pub pendulum_fine_steps: usize,
    pub pendulum_obs: usize,
    pub diffusion_fine: usize,
    pub darcy_fine: usize,
    pub grid_obs: usize,
    pub gp_lengthscale: f64,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            pendulum_k: PENDULUM_STIFFNESS,
            pendulum_t_end: 1.0,
            pendulum_fine_steps: 3000,
            pendulum_obs: 30,
            diffusion_fine: 155,
            darcy_fine: 155,
            grid_obs: 15,
            gp_lengthscale: GP_LENGTHSCALE,
        }
    }
}

impl DataSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.pendulum_k > 0.0 && self.pendulum_t_end > 0.0 && self.gp_lengthscale > 0.0) {
            return bad("pendulum_k, pendulum_t_end and gp_lengthscale must be positive");
        }
        if self.pendulum_obs == 0 || !self.pendulum_fine_steps.is_multiple_of(self.pendulum_obs) {
            return bad("pendulum_fine_steps must be a multiple of pendulum_obs");
        }
        if self.grid_obs < 3 {
            return bad("grid_obs must be at least 3");
        }
        for fine in [self.diffusion_fine, self.darcy_fine] {
            if fine < 2 || (fine - 1) % (self.grid_obs - 1) != 0 {
                return bad("fine grids must subsample exactly onto the observation grid");
            }
        }
        Ok(())
    }

    /// Observation grid of a problem.
    pub fn observation_grid(&self, problem: ProblemId) -> Points {
        match problem {
            ProblemId::Pendulum => {
                let n = self.pendulum_obs;
                let ts: Vec<f64> = (1..=n).map(|j| self.pendulum_t_end * j as f64 / n as f64).collect();
                Points::from_scalars(&ts)
            }
            ProblemId::Diffusion | ProblemId::Darcy => {
                UniformGrid::unit_square(self.grid_obs).expect("validated").points()
            }
        }
    }
}

/// One solution-source pair on the observation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub source: GpSource,
    /// Perturbation amplitude applied on top of the GP source.
    pub beta: f64,
    /// Observed solution components on the observation grid.
    pub u: Vec<Vec<f64>>,
    /// Source values on the observation grid.
    pub f: Vec<f64>,
}

impl Instance {
    pub fn forcing(&self) -> Forcing {
        perturb_forcing(self.source.as_forcing(), self.beta)
    }
}

/// A set of instances sharing a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub problem: ProblemId,
    pub grid: Points,
    pub pairs: Vec<Instance>,
    pub noise_ratio: f64,
    pub seed: u64,
}

/// Source value at an observation point (the source depends on one coordinate).
pub fn source_coordinate(problem: ProblemId, x: &[f64]) -> f64 {
    match problem {
        ProblemId::Pendulum | ProblemId::Diffusion => x[0],
        ProblemId::Darcy => x[1],
    }
}

/// Solves the benchmark for a forcing and restricts the solution to the observation grid.
pub struct ReferenceSolver {
    problem: ProblemId,
    settings: DataSettings,
    darcy: Option<DarcySolver>,
}

impl ReferenceSolver {
    pub fn new(problem: ProblemId, settings: &DataSettings) -> Result<Self> {
        settings.validate()?;
        let darcy = match problem {
            ProblemId::Darcy => Some(DarcySolver::new(settings.darcy_fine)?),
            _ => None,
        };
        Ok(Self {
            problem,
            settings: settings.clone(),
            darcy,
        })
    }

    pub fn problem(&self) -> ProblemId {
        self.problem
    }

    /// Solution components on the observation grid.
    pub fn solve_observed(&self, f: &Forcing) -> Result<Vec<Vec<f64>>> {
        let s = &self.settings;
        let obs = s.observation_grid(self.problem);
        match self.problem {
            ProblemId::Pendulum => {
                let traj = solve_pendulum_reference(&**f, s.pendulum_k, s.pendulum_t_end, s.pendulum_fine_steps)?;
                let fine = UniformGrid::new(vec![Axis {
                    lo: 0.0,
                    hi: s.pendulum_t_end,
                    n: s.pendulum_fine_steps + 1,
                }])?;
                Ok(vec![
                    subsample(&fine, &traj.u1, &obs)?,
                    subsample(&fine, &traj.u2, &obs)?,
                ])
            }
            ProblemId::Diffusion => {
                let fine = UniformGrid::unit_square(s.diffusion_fine)?;
                let u = solve_diffusion_reference(&**f, s.diffusion_fine, s.diffusion_fine)?;
                Ok(vec![subsample(&fine, &u, &obs)?])
            }
            ProblemId::Darcy => {
                let solver = self.darcy.as_ref().expect("constructed for darcy");
                let u = solver.solve(&|x: &[f64]| f(x[1]))?;
                Ok(vec![subsample(&solver.grid(), &u, &obs)?])
            }
        }
    }

    /// Draws a GP source from `stream` of `seed`, applies the perturbation and solves.
    pub fn instance(&self, seed: u64, stream: u64, beta: f64) -> Result<Instance> {
        let mut rng = stream_rng(seed, stream);
        let source = GpSource::sample(self.settings.gp_lengthscale, &mut rng)?;
        self.instance_for(source, beta)
    }

    pub fn instance_for(&self, source: GpSource, beta: f64) -> Result<Instance> {
        let forcing = perturb_forcing(source.as_forcing(), beta);
        let u = self.solve_observed(&forcing)?;
        let grid = self.settings.observation_grid(self.problem);
        let f = grid
            .iter()
            .map(|x| forcing(source_coordinate(self.problem, x)))
            .collect();
        Ok(Instance { source, beta, u, f })
    }
}

/// Generates `count` instances from streams `first_stream..first_stream + count`,
/// with noise of the given ratio added to both solutions and sources.
pub fn generate_set(
    problem: ProblemId,
    settings: &DataSettings,
    count: usize,
    seed: u64,
    first_stream: u64,
    noise_ratio: f64,
) -> Result<TrainingSet> {
    let solver = ReferenceSolver::new(problem, settings)?;
    let pairs = (0..count)
        .into_par_iter()
        .map(|i| {
            let stream = first_stream + i as u64;
            let mut inst = solver.instance(seed, stream, 0.0)?;
            if noise_ratio > 0.0 {
                let mut rng = stream_rng(seed, NOISE_STREAM_OFFSET + stream);
                for c in inst.u.iter_mut() {
                    *c = add_noise(c, noise_ratio, &mut rng)?;
                }
                inst.f = add_noise(&inst.f, noise_ratio, &mut rng)?;
            }
            Ok(inst)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("data generation"))?;
    Ok(TrainingSet {
        problem,
        grid: settings.observation_grid(problem),
        pairs,
        noise_ratio,
        seed,
    })
}

/// Reproducibility record written next to a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub problem: ProblemId,
    pub seed: u64,
    pub first_stream: u64,
    pub count: usize,
    pub noise_ratio: f64,
    pub settings: DataSettings,
    pub files: Vec<String>,
}

/// Writes one CSV per pair (coordinates, solution components, source) and a manifest.
pub fn write_dataset(dir: &Path, set: &TrainingSet, settings: &DataSettings, first_stream: u64) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let coord_names: &[&str] = match set.problem {
        ProblemId::Pendulum => &["t"],
        ProblemId::Diffusion => &["x", "t"],
        ProblemId::Darcy => &["x1", "x2"],
    };
    let comp_names: &[&str] = match set.problem {
        ProblemId::Pendulum => &["u1", "u2"],
        _ => &["u"],
    };
    let mut files = Vec::with_capacity(set.pairs.len());
    for (i, pair) in set.pairs.iter().enumerate() {
        let name = format!("{}_{:03}.csv", set.problem, i);
        let mut w = std::io::BufWriter::new(fs::File::create(dir.join(&name))?);
        let header: Vec<&str> = coord_names.iter().chain(comp_names).chain(&["f"]).copied().collect();
        writeln!(w, "{}", header.join(","))?;
        for (j, x) in set.grid.iter().enumerate() {
            let mut row: Vec<String> = x.iter().map(|v| format!("{v:.17e}")).collect();
            row.extend(pair.u.iter().map(|c| format!("{:.17e}", c[j])));
            row.push(format!("{:.17e}", pair.f[j]));
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()?;
        files.push(name);
    }
    let manifest = Manifest {
        problem: set.problem,
        seed: set.seed,
        first_stream,
        count: set.pairs.len(),
        noise_ratio: set.noise_ratio,
        settings: settings.clone(),
        files,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gp_draw_is_deterministic() {
        let g = Points::from_scalars(&[0.0, 0.3, 0.9]);
        assert_eq!(
            sample_gp_source(0.2, &g, 7).unwrap(),
            sample_gp_source(0.2, &g, 7).unwrap()
        );
        assert_ne!(
            sample_gp_source(0.2, &g, 7).unwrap(),
            sample_gp_source(0.2, &g, 8).unwrap()
        );
    }

    #[test]
    fn gp_source_interpolates_its_draw() {
        let mut rng = stream_rng(3, 0);
        let s = GpSource::sample(0.2, &mut rng).unwrap();
        let mut rng = stream_rng(3, 0);
        let nodes = Points::from_scalars(&s.nodes);
        let (draw, _) = gp_draw(0.2, &nodes, &mut rng).unwrap();
        let worst = s
            .nodes
            .iter()
            .zip(&draw)
            .map(|(t, d)| (s.eval(*t) - d).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn perturbation_examples() {
        let zero: Forcing = Arc::new(|_| 0.0);
        assert!((perturb_forcing(zero.clone(), 1.0)(0.1) - 1.0).abs() < 1e-15);
        let f: Forcing = Arc::new(|t| t * t);
        assert!((perturb_forcing(f.clone(), 0.5)(0.3) - (0.09 - 0.5)).abs() < 1e-12);
        assert_eq!(perturb_forcing(f.clone(), 0.0)(0.7), f(0.7));
    }

    #[test]
    fn zero_noise_is_identity() {
        let v = vec![1.0, -2.0, 3.0];
        assert_eq!(add_noise_seeded(&v, 0.0, 1).unwrap(), v);
        assert!(add_noise_seeded(&v, -0.1, 1).is_err());
    }

    #[test]
    fn subsample_identity_and_stride() {
        let fine = UniformGrid::unit_square(155).unwrap();
        let vals: Vec<f64> = (0..fine.len()).map(|i| i as f64).collect();
        let same = subsample(&fine, &vals, &fine.points()).unwrap();
        assert_eq!(same, vals);
        let coarse = UniformGrid::unit_square(15).unwrap().points();
        let sub = subsample(&fine, &vals, &coarse).unwrap();
        for (k, v) in sub.iter().enumerate() {
            let (i, j) = (k / 15, k % 15);
            assert_eq!(*v, (11 * i * 155 + 11 * j) as f64);
        }
        assert!(subsample(&fine, &vals, &Points::from_rows(&[[0.5003, 0.0]]).unwrap()).is_err());
    }

    #[test]
    fn pendulum_equilibrium() {
        let t = solve_pendulum_reference(&|_| 0.0, 1.0, 1.0, 1000).unwrap();
        assert!(t.u1.iter().chain(&t.u2).all(|v| *v == 0.0));
        assert!(solve_pendulum_reference(&|_| 0.0, 1.0, 1.0, 10).is_err());
    }

    #[test]
    fn diffusion_zero_source() {
        let u = solve_diffusion_reference(&|_| 0.0, 101, 101).unwrap();
        assert!(u.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn darcy_zero_source() {
        let u = solve_darcy_reference(&|_| 0.0, 101).unwrap();
        assert!(u.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn settings_validation() {
        assert!(DataSettings::default().validate().is_ok());
        let bad = DataSettings {
            darcy_fine: 151,
            ..Default::default()
        };
        assert!(bad.validate().unwrap_err().is_config());
    }
}
