//! Cross-validated grid search and the fixed hyperparameter presets.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::stream_rng;
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::points::{norm2, Points};
use crate::problems::ProblemId;
use crate::smoother::{fit_smoother, FieldSamples};

/// Folds used for per-instance smoothing length scale selection.
pub const SMOOTHER_FOLDS: usize = 5;
/// Candidates per smoothing length scale range.
pub const SMOOTHER_CANDIDATES: usize = 12;
/// Relative score difference below which two candidates count as tied.
const TIE_TOL: f64 = 1e-12;

/// Named parameters with explicit candidate lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub names: Vec<String>,
    pub candidates: Vec<Vec<f64>>,
    pub bounds: Vec<(f64, f64)>,
}

impl SearchSpace {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            candidates: Vec::new(),
            bounds: Vec::new(),
        }
    }

    /// Adds `count` log-spaced candidates covering `[lo, hi]`.
    pub fn log_range(mut self, name: &str, lo: f64, hi: f64, count: usize) -> Result<Self> {
        if !(lo > 0.0 && hi >= lo) || count == 0 {
            return Err(Error::invalid(format!(
                "bad log range for '{name}': [{lo}, {hi}] x {count}"
            )));
        }
        let vals = if count == 1 || lo == hi {
            vec![(lo * hi).sqrt()]
        } else {
            let (a, b) = (lo.ln(), hi.ln());
            (0..count)
                .map(|i| {
                    let v = (a + (b - a) * i as f64 / (count - 1) as f64).exp();
                    v.clamp(lo, hi)
                })
                .collect()
        };
        self.names.push(name.to_string());
        self.candidates.push(vals);
        self.bounds.push((lo, hi));
        Ok(self)
    }

    /// Adds an explicit candidate list.
    pub fn values(mut self, name: &str, vals: Vec<f64>) -> Result<Self> {
        if vals.is_empty() {
            return Err(Error::invalid(format!("no candidates for '{name}'")));
        }
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.names.push(name.to_string());
        self.candidates.push(vals);
        self.bounds.push((lo, hi));
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.is_empty() {
            return Err(Error::invalid("search space has no parameters"));
        }
        for ((name, c), (lo, hi)) in self.names.iter().zip(&self.candidates).zip(&self.bounds) {
            if c.is_empty() {
                return Err(Error::invalid(format!("no candidates for '{name}'")));
            }
            if c.iter().any(|v| v < lo || v > hi) {
                return Err(Error::invalid(format!("candidate for '{name}' outside its bounds")));
            }
        }
        Ok(())
    }

    /// Cartesian product of the candidate lists, last parameter varying fastest.
    pub fn grid(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new()];
        for c in &self.candidates {
            out = out
                .into_iter()
                .flat_map(|p| {
                    c.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push(*v);
                        q
                    })
                })
                .collect();
        }
        out
    }
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self::new()
    }
}

/// One row of a CV score table; `score` is `None` when every fold failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub params: Vec<f64>,
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub names: Vec<String>,
    pub best: Vec<f64>,
    pub best_score: f64,
    pub table: Vec<ScoreRow>,
}

impl CvResult {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{},score", self.names.join(","))?;
        for row in &self.table {
            let p: Vec<String> = row.params.iter().map(|v| format!("{v:e}")).collect();
            let s = row.score.map(|s| format!("{s:e}")).unwrap_or_else(|| "failed".into());
            writeln!(w, "{},{s}", p.join(","))?;
        }
        Ok(())
    }
}

/// Seeded shuffled partition of `0..n` into `folds` nearly equal parts.
pub fn fold_partition(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, 0));
    let mut out = vec![Vec::new(); folds];
    for (k, i) in idx.into_iter().enumerate() {
        out[k % folds].push(i);
    }
    out.iter_mut().for_each(|f| f.sort_unstable());
    out
}

/// k-fold cross validation over every point of `space`.
///
/// `fit_score(params, train, test)` fits on the `train` indices and returns the
/// relative L2 error on `test`. The candidate with the lowest mean score wins;
/// ties go to the lexicographically largest parameters, i.e. the longest length
/// scale or largest nugget.
pub fn cv_select<F>(n_data: usize, space: &SearchSpace, folds: usize, seed: u64, fit_score: F) -> Result<CvResult>
where
    F: Fn(&[f64], &[usize], &[usize]) -> Result<f64> + Sync,
{
    space.validate()?;
    if folds < 2 || folds > n_data {
        return Err(Error::invalid(format!("need 2 <= folds <= {n_data}, got {folds}")));
    }
    let parts = fold_partition(n_data, folds, seed);
    let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..folds)
        .map(|k| {
            let train = parts
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != k)
                .flat_map(|(_, p)| p.iter().copied())
                .collect::<Vec<_>>();
            let mut train = train;
            train.sort_unstable();
            (train, parts[k].clone())
        })
        .collect();
    let table: Vec<ScoreRow> = space
        .grid()
        .into_par_iter()
        .map(|params| {
            let mut total = 0.0;
            for (train, test) in &splits {
                match fit_score(&params, train, test) {
                    Ok(s) if s.is_finite() => total += s,
                    _ => return ScoreRow { params, score: None },
                }
            }
            ScoreRow {
                params,
                score: Some(total / folds as f64),
            }
        })
        .collect();
    let mut best: Option<(&ScoreRow, f64)> = None;
    for row in &table {
        let Some(s) = row.score else { continue };
        best = match best {
            None => Some((row, s)),
            Some((b, bs)) => {
                let tied = (s - bs).abs() <= TIE_TOL * bs.abs().max(s.abs());
                let larger = row.params.partial_cmp(&b.params) == Some(std::cmp::Ordering::Greater);
                if (tied && larger) || (!tied && s < bs) {
                    Some((row, s))
                } else {
                    Some((b, bs))
                }
            }
        };
    }
    let Some((row, score)) = best else {
        let failed = table.len();
        return Err(Error::numerical(format!(
            "cross validation failed for all {failed} candidates of {:?}",
            space.names
        )));
    };
    Ok(CvResult {
        names: space.names.clone(),
        best: row.params.clone(),
        best_score: score,
        table,
    })
}

/// Selects a Gaussian smoothing length scale for one instance by k-fold CV
/// over log-spaced candidates in `range`.
pub fn select_smoother_sigma(samples: &FieldSamples, range: (f64, f64), folds: usize, seed: u64) -> Result<CvResult> {
    let mut r = select_smoother(samples, range, &[samples.noise_level], folds, seed)?;
    r.names.remove(0);
    r.best.remove(0);
    r.table.iter_mut().for_each(|row| {
        row.params.remove(0);
    });
    Ok(r)
}

/// Joint CV over the smoothing nugget scale and length scale; `best` is `[lambda_u, sigma]`.
pub fn select_smoother(
    samples: &FieldSamples,
    range: (f64, f64),
    lambdas: &[f64],
    folds: usize,
    seed: u64,
) -> Result<CvResult> {
    let dim = samples.points.dim();
    let space = SearchSpace::new().values("lambda_u", lambdas.to_vec())?.log_range(
        "sigma",
        range.0,
        range.1,
        SMOOTHER_CANDIDATES,
    )?;
    cv_select(samples.points.len(), &space, folds, seed, |p, train, test| {
        let kernel = KernelSpec::gaussian(p[1], dim)?;
        let sub = FieldSamples {
            points: samples.points.select(train),
            values: train.iter().map(|&i| samples.values[i]).collect(),
            noise_level: p[0],
        };
        let field = fit_smoother(&kernel, &sub)?;
        let truth: Vec<f64> = test.iter().map(|&i| samples.values[i]).collect();
        let pts: Points = samples.points.select(test);
        let pred = pts.iter().map(|x| field.value(x)).collect::<Result<Vec<_>>>()?;
        let diff: Vec<f64> = pred.iter().zip(&truth).map(|(a, b)| a - b).collect();
        let den = norm2(&truth);
        Ok(if den > 0.0 { norm2(&diff) / den } else { norm2(&diff) })
    })
}

/// Which column of the hyperparameter tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    I10,
    I20,
    Noisy,
}

impl Variant {
    pub fn for_run(train_size: usize, noise_ratio: f64) -> Result<Self> {
        match (train_size, noise_ratio > 0.0) {
            (20, true) => Ok(Variant::Noisy),
            (10, false) => Ok(Variant::I10),
            (20, false) => Ok(Variant::I20),
            _ => Err(Error::PresetUnavailable(format!(
                "no preset for I = {train_size} with noise ratio {noise_ratio}"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::I10 => "i10",
            Variant::I20 => "i20",
            Variant::Noisy => "noisy",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "i10" => Ok(Variant::I10),
            "i20" => Ok(Variant::I20),
            "noisy" => Ok(Variant::Noisy),
            other => Err(Error::PresetUnavailable(format!("unknown preset variant '{other}'"))),
        }
    }
}

/// A preset entry that may be missing from the tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Availability<T> {
    Available { value: T },
    Unavailable { reason: String },
}

impl<T: Clone> Availability<T> {
    pub fn get(&self) -> Result<T> {
        match self {
            Availability::Available { value } => Ok(value.clone()),
            Availability::Unavailable { reason } => Err(Error::PresetUnavailable(reason.clone())),
        }
    }

    pub fn is_available(&self) -> bool {
        matches!(self, Availability::Available { .. })
    }
}

fn available<T>(value: T) -> Availability<T> {
    Availability::Available { value }
}

/// Fixed hyperparameters for one problem and variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub problem: ProblemId,
    pub variant: Variant,
    pub lambda_u: f64,
    /// Smoothing length scale range for each solution component.
    pub sigma_ranges: Vec<(f64, f64)>,
    pub lambda_k: f64,
    /// ARD length scales for each learned equation.
    pub ard: Availability<Vec<Vec<f64>>>,
    /// Polynomial `(degree, offset)` for each learned equation.
    pub polynomial: Availability<Vec<(u32, f64)>>,
}

impl Preset {
    /// Kernel for learned equation `eq`.
    pub fn ard_kernel(&self, eq: usize) -> Result<KernelSpec> {
        KernelSpec::ard(self.ard.get()?[eq].clone())
    }

    pub fn polynomial_kernel(&self, eq: usize, dim: usize) -> Result<KernelSpec> {
        let (d, c) = self.polynomial.get()?[eq];
        KernelSpec::polynomial(d, c, dim)
    }
}

/// The published hyperparameters for `(problem, variant)`.
pub fn preset(problem: ProblemId, variant: Variant) -> Result<Preset> {
    use Variant::*;
    let p = match problem {
        ProblemId::Pendulum => {
            let sigma_ranges = match variant {
                I10 | I20 => vec![(0.15, 0.45), (0.1, 0.4)],
                Noisy => vec![(0.15, 0.65), (0.1, 0.8)],
            };
            let (lambda_k, l1, l2, p1, p2) = match variant {
                I10 => (1e-5, 0.52, 3.0, (5, 3.5), (5, 2.8)),
                I20 => (1e-5, 1.0, 2.4, (3, 0.015), (3, 0.01)),
                Noisy => (1e-1, 1.0, 1.9, (1, 0.01), (1, 0.01)),
            };
            Preset {
                problem,
                variant,
                lambda_u: 1e-8,
                sigma_ranges,
                lambda_k,
                ard: available(vec![vec![l1, l1], vec![l2, l2]]),
                polynomial: available(vec![p1, p2]),
            }
        }
        ProblemId::Diffusion => Preset {
            problem,
            variant,
            lambda_u: 1e-3,
            sigma_ranges: vec![match variant {
                I10 | I20 => (0.15, 0.7),
                Noisy => (0.4, 1.0),
            }],
            lambda_k: 1e-3,
            ard: available(vec![match variant {
                I10 | I20 => vec![0.50, 1.3, 0.13],
                Noisy => vec![0.50, 2.0, 0.25],
            }]),
            polynomial: match variant {
                I10 => available(vec![(2, 0.23)]),
                I20 => available(vec![(2, 0.0)]),
                Noisy => Availability::Unavailable {
                    reason: "the polynomial kernel failed on noisy diffusion data".into(),
                },
            },
        },
        ProblemId::Darcy => Preset {
            problem,
            variant,
            lambda_u: match variant {
                I10 | I20 => 1e-8,
                Noisy => 1e-2,
            },
            sigma_ranges: vec![match variant {
                I10 | I20 => (0.15, 0.35),
                Noisy => (0.05, 0.5),
            }],
            lambda_k: match variant {
                I10 | I20 => 1e-3,
                Noisy => 1e-1,
            },
            ard: available(vec![match variant {
                I10 => vec![1.2, 1.2, 8.0, 8.0, 10.0, 10.0],
                I20 => vec![0.4, 0.4, 3.2, 3.2, 5.0, 5.0],
                Noisy => vec![0.64, 0.64, 2.0, 2.0, 3.0, 3.0],
            }]),
            polynomial: Availability::Unavailable {
                reason: "no polynomial kernel values exist for the Darcy problem".into(),
            },
        },
    };
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_range_endpoints() {
        let s = SearchSpace::new().log_range("sigma", 0.1, 1.0, 3).unwrap();
        let c = &s.candidates[0];
        assert_eq!(c.len(), 3);
        assert!((c[0] - 0.1).abs() < 1e-15 && (c[2] - 1.0).abs() < 1e-15);
        assert!((c[1] - 0.1f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn grid_is_cartesian() {
        let s = SearchSpace::new()
            .values("a", vec![1.0, 2.0])
            .unwrap()
            .values("b", vec![3.0, 4.0, 5.0])
            .unwrap();
        let g = s.grid();
        assert_eq!(g.len(), 6);
        assert_eq!(g[0], vec![1.0, 3.0]);
        assert_eq!(g[5], vec![2.0, 5.0]);
    }

    #[test]
    fn folds_cover_everything_once() {
        let parts = fold_partition(17, 5, 3);
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        assert_eq!(all, (0..17).collect::<Vec<_>>());
        assert_eq!(parts, fold_partition(17, 5, 3));
    }

    #[test]
    fn single_candidate_wins() {
        let s = SearchSpace::new().values("x", vec![0.3]).unwrap();
        let r = cv_select(10, &s, 2, 0, |_, _, _| Ok(5.0)).unwrap();
        assert_eq!(r.best, vec![0.3]);
    }

    #[test]
    fn exact_candidate_wins() {
        let s = SearchSpace::new().values("x", vec![1.0, 2.0]).unwrap();
        let r = cv_select(10, &s, 5, 0, |p, _, _| Ok(if p[0] == 1.0 { 0.0 } else { 0.1 })).unwrap();
        assert_eq!(r.best, vec![1.0]);
        assert_eq!(r.best_score, 0.0);
    }

    #[test]
    fn ties_go_to_larger_parameters() {
        let s = SearchSpace::new().values("x", vec![1.0, 3.0, 2.0]).unwrap();
        let r = cv_select(10, &s, 2, 0, |_, _, _| Ok(0.5)).unwrap();
        assert_eq!(r.best, vec![3.0]);
    }

    #[test]
    fn all_failures_reported() {
        let s = SearchSpace::new().values("x", vec![1.0, 2.0]).unwrap();
        let r = cv_select(10, &s, 2, 0, |_, _, _| Err(Error::numerical("boom")));
        assert!(matches!(r, Err(Error::NumericalFailure { .. })));
        assert!(cv_select(3, &s, 4, 0, |_, _, _| Ok(0.0)).is_err());
    }

    #[test]
    fn presets_match_tables() {
        let p = preset(ProblemId::Pendulum, Variant::I10).unwrap();
        assert_eq!(p.lambda_u, 1e-8);
        assert_eq!(p.lambda_k, 1e-5);
        assert_eq!(p.polynomial.get().unwrap(), vec![(5, 3.5), (5, 2.8)]);
        let p = preset(ProblemId::Darcy, Variant::I20).unwrap();
        assert_eq!(p.ard.get().unwrap()[0], vec![0.4, 0.4, 3.2, 3.2, 5.0, 5.0]);
        assert_eq!(p.lambda_k, 1e-3);
        let p = preset(ProblemId::Diffusion, Variant::I20).unwrap();
        assert_eq!(p.lambda_u, 1e-3);
        assert_eq!(p.ard.get().unwrap()[0], vec![0.50, 1.3, 0.13]);
        assert_eq!(p.polynomial.get().unwrap(), vec![(2, 0.0)]);
        let p = preset(ProblemId::Diffusion, Variant::Noisy).unwrap();
        assert!(matches!(p.polynomial.get(), Err(Error::PresetUnavailable(_))));
    }
}
