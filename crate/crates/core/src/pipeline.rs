//! Problem-specific glue between data, the three learning steps and the solver.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{source_coordinate, DataSettings, Forcing, Instance, TrainingSet};
use crate::equation::{fit_equation, FnField, LearnedEquation, ScalarField};
use crate::error::{Error, Result};
use crate::kernel::{DiffOp, KernelSpec};
use crate::points::Points;
use crate::problems::{darcy_coefficient, ProblemId, DIFFUSION_COEFF, REACTION_COEFF};
use crate::sindy::{as_equation, build_dictionary, stlsq, Dictionary, Term};
use crate::smoother::{fit_smoother, FieldSamples, SmoothedField};
use crate::solver::{
    assemble, BoundaryCondition, Collocation, CollocationProblem, FeatureSource, GaussNewtonOptions, InteriorEquation,
    InteriorOp, LbfgsOptions, SolverState,
};
use crate::tuning::{select_smoother, select_smoother_sigma, SMOOTHER_FOLDS};

/// Observation grid split into interior and boundary parts.
#[derive(Clone, Debug)]
pub struct Geometry {
    pub problem: ProblemId,
    pub observation: Points,
    /// Indices into `observation` of the interior points (empty for boundary-free grids).
    pub interior_idx: Vec<usize>,
    pub interior: Points,
    pub boundary: Points,
}

impl Geometry {
    pub fn new(problem: ProblemId, settings: &DataSettings) -> Result<Self> {
        settings.validate()?;
        let observation = settings.observation_grid(problem);
        match problem {
            ProblemId::Pendulum => Ok(Self {
                problem,
                interior_idx: (0..observation.len()).collect(),
                interior: observation.clone(),
                boundary: Points::from_scalars(&[0.0]),
                observation,
            }),
            ProblemId::Diffusion | ProblemId::Darcy => {
                let n = settings.grid_obs;
                let mut interior_idx = Vec::new();
                let mut boundary_idx = Vec::new();
                for i in 0..n {
                    for j in 0..n {
                        let on_boundary = match problem {
                            // (x, t): the final time slice is part of the interior
                            ProblemId::Diffusion => i == 0 || i == n - 1 || j == 0,
                            _ => i == 0 || i == n - 1 || j == 0 || j == n - 1,
                        };
                        if on_boundary {
                            boundary_idx.push(i * n + j);
                        } else {
                            interior_idx.push(i * n + j);
                        }
                    }
                }
                Ok(Self {
                    problem,
                    interior: observation.select(&interior_idx),
                    boundary: observation.select(&boundary_idx),
                    interior_idx,
                    observation,
                })
            }
        }
    }
}

/// The functionals applied at every interior collocation point.
pub fn interior_ops(problem: ProblemId) -> Vec<InteriorOp> {
    let op = |component, op, name: &str| InteriorOp {
        component,
        op,
        name: name.to_string(),
    };
    match problem {
        ProblemId::Pendulum => vec![
            op(0, DiffOp::value(1), "u1"),
            op(1, DiffOp::value(1), "u2"),
            op(0, DiffOp::partial(1, 0), "u1_t"),
            op(1, DiffOp::partial(1, 0), "u2_t"),
        ],
        ProblemId::Diffusion => vec![
            op(0, DiffOp::value(2), "u"),
            op(0, DiffOp::partial(2, 1), "u_t"),
            op(0, DiffOp::second(2, 0), "u_xx"),
        ],
        ProblemId::Darcy => vec![
            op(0, DiffOp::value(2), "u"),
            op(0, DiffOp::partial(2, 0), "u_x1"),
            op(0, DiffOp::partial(2, 1), "u_x2"),
            op(0, DiffOp::laplacian(2), "lap_u"),
        ],
    }
}

/// How one learned equation reads the interior functionals.
#[derive(Clone, Debug, PartialEq)]
pub struct EquationSlot {
    pub inputs: Vec<FeatureSource>,
    pub explicit: Option<usize>,
    /// Whether the right-hand side is the source term (otherwise zero).
    pub forced: bool,
}

pub fn equation_slots(problem: ProblemId) -> Vec<EquationSlot> {
    use FeatureSource::*;
    match problem {
        ProblemId::Pendulum => vec![
            EquationSlot {
                inputs: vec![Op(0), Op(1)],
                explicit: Some(2),
                forced: false,
            },
            EquationSlot {
                inputs: vec![Op(0), Op(1)],
                explicit: Some(3),
                forced: true,
            },
        ],
        ProblemId::Diffusion => vec![EquationSlot {
            inputs: vec![Op(0), Op(1), Op(2)],
            explicit: None,
            forced: true,
        }],
        ProblemId::Darcy => vec![EquationSlot {
            inputs: vec![Coordinate(0), Coordinate(1), Op(0), Op(1), Op(2), Op(3)],
            explicit: None,
            forced: true,
        }],
    }
}

/// Column names of the feature vector of each learned equation.
pub fn feature_names(problem: ProblemId) -> Vec<String> {
    let names: &[&str] = match problem {
        ProblemId::Pendulum => &["u1", "u2"],
        ProblemId::Diffusion => &["u", "u_t", "u_xx"],
        ProblemId::Darcy => &["x1", "x2", "u", "u_x1", "u_x2", "lap_u"],
    };
    names.iter().map(|s| s.to_string()).collect()
}

/// The true equations in the solver's parameterization.
pub fn true_equations(problem: ProblemId, k: f64) -> Vec<Arc<dyn ScalarField>> {
    match problem {
        ProblemId::Pendulum => vec![
            Arc::new(FnField::new(2, |s| s[1], |_, g| g[1] = 1.0)),
            Arc::new(FnField::new(
                2,
                move |s| -k * s[0].sin(),
                move |s, g| g[0] = -k * s[0].cos(),
            )),
        ],
        ProblemId::Diffusion => vec![Arc::new(FnField::new(
            3,
            |s| s[1] - DIFFUSION_COEFF * s[2] - REACTION_COEFF * s[0] * s[0],
            |s, g| {
                g[0] = -2.0 * REACTION_COEFF * s[0];
                g[1] = 1.0;
                g[2] = -DIFFUSION_COEFF;
            },
        ))],
        ProblemId::Darcy => vec![Arc::new(FnField::new(6, darcy_operator, darcy_operator_grad))],
    }
}

/// `-(a lap u + grad a . grad u)` over `(x1, x2, u, u_x1, u_x2, lap u)`.
fn darcy_operator(s: &[f64]) -> f64 {
    let ga = crate::problems::darcy_coefficient_grad(s);
    -(darcy_coefficient(s) * s[5] + ga[0] * s[3] + ga[1] * s[4])
}

fn darcy_operator_grad(s: &[f64], g: &mut [f64]) {
    let (x1, x2) = (s[0], s[1]);
    let phase = (PI * x1).sin() + (PI * x2).sin();
    let (ep, em) = (phase.exp(), (-phase).exp());
    let (c1, c2) = ((PI * x1).cos(), (PI * x2).cos());
    let (s1, s2) = ((PI * x1).sin(), (PI * x2).sin());
    let a = ep + em;
    let da = ep - em;
    let a1 = da * PI * c1;
    let a2 = da * PI * c2;
    let a11 = a * PI * PI * c1 * c1 - da * PI * PI * s1;
    let a22 = a * PI * PI * c2 * c2 - da * PI * PI * s2;
    let a12 = a * PI * PI * c1 * c2;
    g[0] = -(a1 * s[5] + a11 * s[3] + a12 * s[4]);
    g[1] = -(a2 * s[5] + a12 * s[3] + a22 * s[4]);
    g[2] = 0.0;
    g[3] = -a1;
    g[4] = -a2;
    g[5] = -a;
}

/// Step (i) settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingSettings {
    pub lambda_u: f64,
    /// Gaussian length scale range for each component.
    pub sigma_ranges: Vec<(f64, f64)>,
    /// Select the length scale per instance by CV; otherwise use the range midpoint.
    pub cross_validate: bool,
    /// Nugget scales searched jointly with the length scale; empty keeps `lambda_u`.
    #[serde(default)]
    pub lambda_candidates: Vec<f64>,
}

/// Smooths every component of one instance; returns the fields and the chosen length scales.
pub fn smooth_instance(
    geom: &Geometry,
    inst: &Instance,
    s: &SmoothingSettings,
    seed: u64,
) -> Result<(Vec<SmoothedField>, Vec<f64>)> {
    if s.sigma_ranges.len() != inst.u.len() {
        return Err(Error::Config(format!(
            "{} smoothing ranges for {} solution components",
            s.sigma_ranges.len(),
            inst.u.len()
        )));
    }
    let dim = geom.observation.dim();
    let mut fields = Vec::new();
    let mut sigmas = Vec::new();
    for (c, (u, range)) in inst.u.iter().zip(&s.sigma_ranges).enumerate() {
        let samples = FieldSamples::new(geom.observation.clone(), u.clone(), s.lambda_u)?;
        let seed = seed.wrapping_add(c as u64);
        let (samples, sigma) = match (s.cross_validate, s.lambda_candidates.is_empty()) {
            (true, true) => {
                let sigma = select_smoother_sigma(&samples, *range, SMOOTHER_FOLDS, seed)?.best[0];
                (samples, sigma)
            }
            (true, false) => {
                let best = select_smoother(&samples, *range, &s.lambda_candidates, SMOOTHER_FOLDS, seed)?.best;
                (FieldSamples::new(samples.points, samples.values, best[0])?, best[1])
            }
            (false, _) => (samples, 0.5 * (range.0 + range.1)),
        };
        fields.push(fit_smoother(&KernelSpec::gaussian(sigma, dim)?, &samples)?);
        sigmas.push(sigma);
    }
    Ok((fields, sigmas))
}

/// Interior functional values of smoothed fields, one row per interior point.
pub fn op_values(geom: &Geometry, fields: &[SmoothedField]) -> Result<Vec<Vec<f64>>> {
    let ops = interior_ops(geom.problem);
    geom.interior
        .iter()
        .map(|x| ops.iter().map(|op| fields[op.component].eval_op(&op.op, x)).collect())
        .collect()
}

fn feature_row(slot: &EquationSlot, x: &[f64], vals: &[f64]) -> Vec<f64> {
    slot.inputs
        .iter()
        .map(|src| match *src {
            FeatureSource::Coordinate(a) => x[a],
            FeatureSource::Op(k) => vals[k],
        })
        .collect()
}

/// Source values at the interior points.
pub fn interior_source(geom: &Geometry, f_obs: &[f64]) -> Vec<f64> {
    geom.interior_idx.iter().map(|&i| f_obs[i]).collect()
}

/// Features and targets of every learned equation for one smoothed instance.
pub fn learning_rows(geom: &Geometry, fields: &[SmoothedField], f_obs: &[f64]) -> Result<Vec<(Points, Vec<f64>)>> {
    let vals = op_values(geom, fields)?;
    let f_int = interior_source(geom, f_obs);
    equation_slots(geom.problem)
        .iter()
        .map(|slot| {
            let mut feats = Points::empty(slot.inputs.len());
            let mut targets = Vec::with_capacity(vals.len());
            for (j, (x, v)) in geom.interior.iter().zip(&vals).enumerate() {
                feats.push(&feature_row(slot, x, v))?;
                let rhs = if slot.forced { f_int[j] } else { 0.0 };
                targets.push(match slot.explicit {
                    Some(k) => v[k] - rhs,
                    None => rhs,
                });
            }
            Ok((feats, targets))
        })
        .collect()
}

/// Step (ii) learner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "learner", rename_all = "lowercase")]
pub enum Learner {
    /// Kernel regression, one kernel per learned equation.
    Kernel {
        kernels: Vec<KernelSpec>,
        lambda_k: f64,
    },
    Sindy {
        threshold: f64,
        max_iters: usize,
    },
}

/// Everything learned from a training set.
#[derive(Clone, Debug)]
pub struct Trained {
    pub problem: ProblemId,
    pub equations: Vec<LearnedEquation>,
    /// Step (i) length scales per training instance and component.
    pub smoother_sigmas: Vec<Vec<f64>>,
}

impl Trained {
    pub fn models(&self) -> Vec<Arc<dyn ScalarField>> {
        self.equations
            .iter()
            .map(|e| Arc::new(e.clone()) as Arc<dyn ScalarField>)
            .collect()
    }

    /// Median selected Step (i) length scale of each component.
    pub fn median_sigmas(&self) -> Vec<f64> {
        let m = self.smoother_sigmas.first().map_or(0, Vec::len);
        (0..m)
            .map(|c| {
                let mut v: Vec<f64> = self.smoother_sigmas.iter().map(|s| s[c]).collect();
                v.sort_by(f64::total_cmp);
                let n = v.len();
                if n % 2 == 1 {
                    v[n / 2]
                } else {
                    0.5 * (v[n / 2 - 1] + v[n / 2])
                }
            })
            .collect()
    }
}

/// Smooths every training instance in parallel.
pub fn smooth_set(
    geom: &Geometry,
    set: &TrainingSet,
    s: &SmoothingSettings,
    seed: u64,
) -> Result<Vec<(Vec<SmoothedField>, Vec<f64>)>> {
    set.pairs
        .par_iter()
        .enumerate()
        .map(|(i, inst)| smooth_instance(geom, inst, s, seed.wrapping_add(1000 * i as u64)))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("smoothing"))
}

/// Steps (i) and (ii) on a training set.
pub fn train(
    geom: &Geometry,
    set: &TrainingSet,
    smoothing: &SmoothingSettings,
    learner: &Learner,
    seed: u64,
) -> Result<Trained> {
    let smoothed = smooth_set(geom, set, smoothing, seed)?;
    let slots = equation_slots(geom.problem);
    let dims: Vec<usize> = slots.iter().map(|s| s.inputs.len()).collect();
    let mut feats: Vec<Points> = dims.iter().map(|&d| Points::empty(d)).collect();
    let mut targets: Vec<Vec<f64>> = vec![Vec::new(); slots.len()];
    for ((fields, _), inst) in smoothed.iter().zip(&set.pairs) {
        for (e, (p, t)) in learning_rows(geom, fields, &inst.f)?.into_iter().enumerate() {
            feats[e] = feats[e].concat(&p)?;
            targets[e].extend(t);
        }
    }
    let equations =
        fit_equations(geom.problem, &feats, &targets, learner).map_err(|e| e.in_stage("equation learning"))?;
    Ok(Trained {
        problem: geom.problem,
        equations,
        smoother_sigmas: smoothed.into_iter().map(|(_, s)| s).collect(),
    })
}

/// Step (ii) on assembled features and targets.
pub fn fit_equations(
    problem: ProblemId,
    feats: &[Points],
    targets: &[Vec<f64>],
    learner: &Learner,
) -> Result<Vec<LearnedEquation>> {
    let names = feature_names(problem);
    match learner {
        Learner::Kernel { kernels, lambda_k } => {
            if kernels.len() != feats.len() {
                return Err(Error::Config(format!(
                    "{} equation kernels for {} learned equations",
                    kernels.len(),
                    feats.len()
                )));
            }
            kernels
                .iter()
                .zip(feats)
                .zip(targets)
                .map(|((k, s), f)| fit_equation(k, s, f, *lambda_k, names.clone()))
                .collect()
        }
        Learner::Sindy { threshold, max_iters } => {
            let dict = build_dictionary(problem)?;
            let last = feats.len() - 1;
            let design = dict.design_matrix(&feats[last])?;
            let coef = stlsq(&design, &targets[last], *threshold, *max_iters)?;
            let learned = as_equation(&dict, &coef, names.clone())?;
            match problem {
                ProblemId::Pendulum => {
                    // the kinematic equation u1_t = u2 is imposed, not learned
                    let exact = Dictionary::with_feature_names(vec![Term::monomial(&[(1, 1)])], &["u1", "u2"])?;
                    Ok(vec![as_equation(&exact, &[1.0], names)?, learned])
                }
                _ => Ok(vec![learned]),
            }
        }
    }
}

/// Step (iii) settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveSettings {
    pub backend: Backend,
    pub gn_iters: usize,
    pub lbfgs_steps: usize,
    pub lbfgs_step_size: f64,
    pub lambda_p: f64,
    pub lambda_b: f64,
    pub nugget: f64,
    /// Gaussian length scale of the solution kernel for each component.
    pub sigmas: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    GaussNewton,
    Lbfgs,
}

/// Assembles the collocation system for a set of models; sources start at zero.
pub fn build_collocation(geom: &Geometry, models: Vec<Arc<dyn ScalarField>>, s: &SolveSettings) -> Result<Collocation> {
    let problem = geom.problem;
    let slots = equation_slots(problem);
    if models.len() != slots.len() {
        return Err(Error::invalid(format!(
            "{} models for {} equations",
            models.len(),
            slots.len()
        )));
    }
    if s.sigmas.len() != problem.components() {
        return Err(Error::Config(format!(
            "{} solver length scales for {} components",
            s.sigmas.len(),
            problem.components()
        )));
    }
    let dim = problem.domain_dim();
    let kernels = s
        .sigmas
        .iter()
        .map(|&sig| KernelSpec::gaussian(sig, dim))
        .collect::<Result<Vec<_>>>()?;
    let ni = geom.interior.len();
    let nb = geom.boundary.len();
    let equations = models
        .into_iter()
        .zip(slots)
        .map(|(model, slot)| InteriorEquation {
            model,
            inputs: slot.inputs,
            explicit: slot.explicit,
            source: vec![0.0; ni],
        })
        .collect();
    let boundary_conditions = (0..problem.components())
        .map(|c| BoundaryCondition {
            component: c,
            op: DiffOp::value(dim),
            data: vec![0.0; nb],
        })
        .collect();
    assemble(CollocationProblem {
        kernels,
        interior_points: geom.interior.clone(),
        boundary_points: geom.boundary.clone(),
        interior_ops: interior_ops(problem),
        boundary_conditions,
        equations,
        lambda_p: s.lambda_p,
        lambda_b: s.lambda_b,
        nugget: s.nugget,
    })
    .map_err(|e| e.in_stage("collocation assembly"))
}

/// Solves for one forcing and returns the prediction on the observation grid.
pub fn predict(
    base: &Collocation,
    geom: &Geometry,
    forcing: &Forcing,
    s: &SolveSettings,
) -> Result<(Vec<Vec<f64>>, SolverState)> {
    let problem = geom.problem;
    let f_int: Vec<f64> = geom
        .interior
        .iter()
        .map(|x| forcing(source_coordinate(problem, x)))
        .collect();
    let sources = equation_slots(problem)
        .iter()
        .map(|slot| {
            if slot.forced {
                f_int.clone()
            } else {
                vec![0.0; f_int.len()]
            }
        })
        .collect();
    let mut sys = base.clone();
    sys.set_sources(sources)?;
    let state = match s.backend {
        Backend::GaussNewton => sys.gauss_newton(
            None,
            GaussNewtonOptions {
                iters: s.gn_iters,
                line_search: true,
            },
        )?,
        Backend::Lbfgs => sys.lbfgs(
            None,
            LbfgsOptions {
                steps: s.lbfgs_steps,
                step_size: s.lbfgs_step_size,
            },
        )?,
    };
    let u = sys.reconstruct(&state)?;
    let pred = (0..problem.components())
        .map(|c| u.values_on(c, &geom.observation))
        .collect::<Result<Vec<_>>>()?;
    Ok((pred, state))
}

/// Relative L2 error of stacked components.
pub fn stacked_relative_l2(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    let p: Vec<f64> = pred.concat();
    let t: Vec<f64> = truth.concat();
    crate::experiment::relative_l2(&p, &t)
}

/// Relative error between learned and true equations at the features of a
/// collection of smoothed instances. Only source-driven equations enter; their
/// errors are stacked over equations and instances.
pub fn discovery_error(
    geom: &Geometry,
    equations: &[LearnedEquation],
    truth: &[Arc<dyn ScalarField>],
    smoothed: &[Vec<SmoothedField>],
) -> Result<f64> {
    let slots = equation_slots(geom.problem);
    if equations.len() != slots.len() || truth.len() != slots.len() {
        return Err(Error::invalid(
            "one learned and one true equation per slot are required",
        ));
    }
    let mut pred = Vec::new();
    let mut exact = Vec::new();
    for fields in smoothed {
        let vals = op_values(geom, fields)?;
        for ((slot, eq), p) in slots.iter().zip(equations).zip(truth) {
            if !slot.forced {
                continue;
            }
            for (x, v) in geom.interior.iter().zip(&vals) {
                let row = feature_row(slot, x, v);
                pred.push(eq.value(&row));
                exact.push(p.value(&row));
            }
        }
    }
    crate::experiment::relative_l2(&pred, &exact)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_counts() {
        let s = DataSettings::default();
        let p = Geometry::new(ProblemId::Pendulum, &s).unwrap();
        assert_eq!((p.interior.len(), p.boundary.len()), (30, 1));
        let d = Geometry::new(ProblemId::Diffusion, &s).unwrap();
        assert_eq!((d.interior.len(), d.boundary.len()), (182, 43));
        let y = Geometry::new(ProblemId::Darcy, &s).unwrap();
        assert_eq!((y.interior.len(), y.boundary.len()), (169, 56));
    }

    #[test]
    fn darcy_operator_gradient() {
        let s = [0.3, 0.6, 0.2, -0.4, 0.9, 1.7];
        let mut g = [0.0; 6];
        darcy_operator_grad(&s, &mut g);
        for k in 0..6 {
            let h = 1e-6;
            let (mut sp, mut sm) = (s, s);
            sp[k] += h;
            sm[k] -= h;
            let fd = (darcy_operator(&sp) - darcy_operator(&sm)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6 * g[k].abs().max(1.0), "{k}: {fd} vs {}", g[k]);
        }
    }
}
