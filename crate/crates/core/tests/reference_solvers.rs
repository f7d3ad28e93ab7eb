use std::f64::consts::PI;

use kernel_pde::datagen::{
    add_noise_seeded, sample_gp_source, solve_darcy_reference, solve_diffusion_reference, solve_diffusion_with,
    solve_pendulum_reference, subsample, DarcySolver, UniformGrid,
};
use kernel_pde::problems::{darcy_coefficient, darcy_coefficient_grad};
use kernel_pde::Points;

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

#[test]
fn pendulum_matches_linearization_for_small_forcing() {
    let c = 1e-3;
    let traj = solve_pendulum_reference(&|_| c, 1.0, 1.0, 3000).unwrap();
    for (t, u) in traj.t.iter().zip(&traj.u1) {
        let lin = c * (1.0 - t.cos());
        assert!((u - lin).abs() < 1e-9, "t = {t}: {u} vs {lin}");
    }
}

#[test]
fn pendulum_self_convergence() {
    let f = |t: f64| 2.0 * (3.0 * t).sin() + 1.0;
    let a = solve_pendulum_reference(&f, 1.0, 1.0, 3000).unwrap();
    let b = solve_pendulum_reference(&f, 1.0, 1.0, 6000).unwrap();
    let (ea, eb) = (a.u1.last().unwrap(), b.u1.last().unwrap());
    assert!((ea - eb).abs() < 1e-8 * eb.abs());
    let (ea, eb) = (a.u2.last().unwrap(), b.u2.last().unwrap());
    assert!((ea - eb).abs() < 1e-8 * eb.abs());
}

#[test]
fn diffusion_manufactured_solution() {
    let n = 155;
    let src = |x: f64, t: f64| {
        let s = (PI * x).sin();
        s + 0.01 * PI * PI * t * s - 0.01 * t * t * s * s
    };
    let u = solve_diffusion_with(&src, n, n).unwrap();
    let grid = UniformGrid::unit_square(n).unwrap();
    let exact: Vec<f64> = grid.points().iter().map(|p| p[1] * (PI * p[0]).sin()).collect();
    let e = rel_l2(&u, &exact);
    assert!(e < 1e-3, "relative error {e}");
}

#[test]
fn diffusion_self_convergence() {
    let f = |x: f64| 3.0 * (2.0 * PI * x).sin() + 1.0;
    let coarse = solve_diffusion_reference(&f, 155, 155).unwrap();
    let fine = solve_diffusion_reference(&f, 309, 309).unwrap();
    let fine_grid = UniformGrid::unit_square(309).unwrap();
    let on_coarse = subsample(&fine_grid, &fine, &UniformGrid::unit_square(155).unwrap().points()).unwrap();
    let e = rel_l2(&coarse, &on_coarse);
    assert!(e < 1e-4, "self-convergence {e}");
}

#[test]
fn darcy_manufactured_solution() {
    let n = 155;
    let f = |x: &[f64]| {
        let (s1, s2) = ((PI * x[0]).sin(), (PI * x[1]).sin());
        let (c1, c2) = ((PI * x[0]).cos(), (PI * x[1]).cos());
        let u = s1 * s2;
        let grad_u = [PI * c1 * s2, PI * s1 * c2];
        let ga = darcy_coefficient_grad(x);
        -(darcy_coefficient(x) * (-2.0 * PI * PI * u) + ga[0] * grad_u[0] + ga[1] * grad_u[1])
    };
    let u = solve_darcy_reference(&f, n).unwrap();
    let exact: Vec<f64> = UniformGrid::unit_square(n)
        .unwrap()
        .points()
        .iter()
        .map(|p| (PI * p[0]).sin() * (PI * p[1]).sin())
        .collect();
    let e = rel_l2(&u, &exact);
    assert!(e < 1e-3, "relative error {e}");
}

#[test]
fn darcy_self_convergence() {
    let f = |x: &[f64]| (3.0 * x[1]).cos() + x[1];
    let coarse = DarcySolver::new(155).unwrap().solve(&f).unwrap();
    let fine = DarcySolver::new(309).unwrap().solve(&f).unwrap();
    let grid = UniformGrid::unit_square(309).unwrap();
    let on_coarse = subsample(&grid, &fine, &UniformGrid::unit_square(155).unwrap().points()).unwrap();
    let e = rel_l2(&coarse, &on_coarse);
    assert!(e < 1e-3, "self-convergence {e}");
}

#[test]
fn gp_single_point_mean() {
    let p = Points::from_scalars(&[0.5]);
    let n = 10_000;
    let mean: f64 = (0..n).map(|s| sample_gp_source(0.2, &p, s).unwrap()[0]).sum::<f64>() / n as f64;
    assert!(mean.abs() < 3e-2, "mean {mean}");
}

#[test]
fn gp_autocorrelation_at_lengthscale_lag() {
    // 100 uniform points with spacing 1/99; lag 0.2 is about 20 steps
    let xs: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
    let p = Points::from_scalars(&xs);
    let lag = 20;
    let (mut cross, mut var0, mut var1) = (0.0, 0.0, 0.0);
    for s in 0..200 {
        let d = sample_gp_source(0.2, &p, s).unwrap();
        for i in 0..100 - lag {
            cross += d[i] * d[i + lag];
            var0 += d[i] * d[i];
            var1 += d[i + lag] * d[i + lag];
        }
    }
    let rho = cross / (var0 * var1).sqrt();
    let expected = (-(lag as f64 / 99.0).powi(2) / (2.0 * 0.04)).exp();
    assert!((rho - expected).abs() < 0.1, "rho {rho}, expected {expected}");
    assert!(((-0.5f64).exp() - expected).abs() < 0.02);
}

#[test]
fn noise_standard_deviation_matches_ratio() {
    let c = -3.0;
    let v = vec![c; 10_000];
    let noisy = add_noise_seeded(&v, 0.1, 11).unwrap();
    let n = noisy.len() as f64;
    let mean = noisy.iter().sum::<f64>() / n;
    let std = (noisy.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((std - 0.3).abs() < 0.02 * 0.3, "std {std}");
    assert_eq!(noisy, add_noise_seeded(&v, 0.1, 11).unwrap());
}
