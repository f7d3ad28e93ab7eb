//! Identifiers and closed-form pieces of the three benchmark problems.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Default pendulum stiffness `k`.
pub const PENDULUM_STIFFNESS: f64 = 1.0;
/// Diffusion coefficient in front of `u_xx`.
pub const DIFFUSION_COEFF: f64 = 0.01;
/// Reaction coefficient in front of `u^2`.
pub const REACTION_COEFF: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemId {
    Pendulum,
    Diffusion,
    Darcy,
}

impl ProblemId {
    pub const ALL: [ProblemId; 3] = [ProblemId::Pendulum, ProblemId::Diffusion, ProblemId::Darcy];

    pub fn name(self) -> &'static str {
        match self {
            ProblemId::Pendulum => "pendulum",
            ProblemId::Diffusion => "diffusion",
            ProblemId::Darcy => "darcy",
        }
    }

    /// Dimension of the domain (time counts as a coordinate).
    pub fn domain_dim(self) -> usize {
        match self {
            ProblemId::Pendulum => 1,
            ProblemId::Diffusion | ProblemId::Darcy => 2,
        }
    }

    /// Number of solution components.
    pub fn components(self) -> usize {
        match self {
            ProblemId::Pendulum => 2,
            ProblemId::Diffusion | ProblemId::Darcy => 1,
        }
    }
}

impl fmt::Display for ProblemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProblemId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pendulum" => Ok(ProblemId::Pendulum),
            "diffusion" => Ok(ProblemId::Diffusion),
            "darcy" => Ok(ProblemId::Darcy),
            other => Err(Error::Config(format!("unknown problem '{other}'"))),
        }
    }
}

/// Darcy permeability `a(x) = exp(s) + exp(-s)` with `s = sin(pi x1) + sin(pi x2)`.
pub fn darcy_coefficient(x: &[f64]) -> f64 {
    let s = darcy_phase(x);
    s.exp() + (-s).exp()
}

/// Gradient of [`darcy_coefficient`].
pub fn darcy_coefficient_grad(x: &[f64]) -> [f64; 2] {
    use std::f64::consts::PI;
    let s = darcy_phase(x);
    let da = s.exp() - (-s).exp();
    [da * PI * (PI * x[0]).cos(), da * PI * (PI * x[1]).cos()]
}

fn darcy_phase(x: &[f64]) -> f64 {
    use std::f64::consts::PI;
    (PI * x[0]).sin() + (PI * x[1]).sin()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficient_at_center() {
        let a = darcy_coefficient(&[0.5, 0.5]);
        assert!((a - (2f64.exp() + (-2f64).exp())).abs() < 1e-12);
        assert!((a - 7.5244).abs() < 1e-4);
    }

    #[test]
    fn coefficient_gradient() {
        let x = [0.3, 0.7];
        let g = darcy_coefficient_grad(&x);
        let h = 1e-6;
        let fd0 = (darcy_coefficient(&[x[0] + h, x[1]]) - darcy_coefficient(&[x[0] - h, x[1]])) / (2.0 * h);
        let fd1 = (darcy_coefficient(&[x[0], x[1] + h]) - darcy_coefficient(&[x[0], x[1] - h])) / (2.0 * h);
        assert!((fd0 - g[0]).abs() < 1e-7 && (fd1 - g[1]).abs() < 1e-7);
    }

    #[test]
    fn parse_round_trip() {
        for p in ProblemId::ALL {
            assert_eq!(p.name().parse::<ProblemId>().unwrap(), p);
        }
        assert!("heat".parse::<ProblemId>().is_err());
    }
}
