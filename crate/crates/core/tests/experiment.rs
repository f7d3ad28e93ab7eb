use kernel_pde::datagen::generate_set;
use kernel_pde::experiment::{
    discover, emit_beta_csv, emit_report, mean_std, read_report, run_discovery_robustness, run_operator_learning,
    solve_test_case, Discovery, ExperimentConfig, HyperMode, Method, ReportFormat, IMPORTED_TAG,
};
use kernel_pde::pipeline::{equation_slots, learning_rows, smooth_set, Geometry};
use kernel_pde::{Error, ProblemId};
use tempfile::TempDir;

fn pendulum(method: Method, cases: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(ProblemId::Pendulum, method);
    cfg.train_size = 10;
    cfg.test_cases = cases;
    cfg
}

#[test]
fn report_round_trips_through_json() {
    let report = run_operator_learning(&pendulum(Method::KernelPolynomial, 3)).unwrap();
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("report.json");
    emit_report(&report, ReportFormat::Json, &path).unwrap();
    assert_eq!(read_report(&path).unwrap(), report);

    let (mean, std) = mean_std(&report.per_case).unwrap();
    assert!((mean - report.mean).abs() <= 1e-12);
    assert!((std - report.std).abs() <= 1e-12);
    assert!(!report.paper_reference_values.is_empty());
    assert!(report
        .paper_reference_values
        .iter()
        .all(|r| r.provenance == IMPORTED_TAG));
    assert!(!report.metadata.non_paper_defaults.is_empty());
    assert_eq!(report.metadata.config_hash, report.config.hash());
}

#[test]
fn csv_report_lists_every_case() {
    let report = run_operator_learning(&pendulum(Method::Sindy, 4)).unwrap();
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("report.csv");
    emit_report(&report, ReportFormat::Csv, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let values: Vec<f64> = text
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(5).and_then(|v| v.parse().ok()))
        .collect();
    assert_eq!(values, report.per_case);
}

#[test]
fn empty_report_is_rejected() {
    let mut report = run_operator_learning(&pendulum(Method::Sindy, 1)).unwrap();
    report.per_case.clear();
    let dir = TempDir::new().unwrap();
    assert!(emit_report(&report, ReportFormat::Json, &dir.path().join("r.json")).is_err());
}

#[test]
fn saved_equation_reproduces_the_benchmark_case() {
    let cfg = pendulum(Method::KernelArd, 3);
    let report = run_operator_learning(&cfg).unwrap();
    let d = discover(&cfg).unwrap();
    let restored = Discovery::from_json(&d.to_json().unwrap()).unwrap();
    assert_eq!(restored, d);
    for i in 0..3 {
        let sol = solve_test_case(&cfg, &restored.equations, i as u64).unwrap();
        assert!((sol.relative_error - report.per_case[i]).abs() <= 1e-12 * report.per_case[i].max(1e-300));
    }
}

#[test]
fn learning_rows_match_equation_slots() {
    for problem in [ProblemId::Pendulum, ProblemId::Diffusion, ProblemId::Darcy] {
        let mut cfg = ExperimentConfig::new(problem, Method::KernelPolynomial);
        cfg.train_size = 10;
        let geom = Geometry::new(problem, &cfg.data).unwrap();
        let set = generate_set(problem, &cfg.data, 2, 0, 0, 0.0).unwrap();
        let (_, smoothing) = kernel_pde::experiment::resolve_smoothing(&cfg).unwrap();
        let smoothed = smooth_set(&geom, &set, &smoothing, 0).unwrap();
        let rows = learning_rows(&geom, &smoothed[0].0, &set.pairs[0].f).unwrap();
        let slots = equation_slots(problem);
        assert_eq!(rows.len(), slots.len());
        for ((feats, targets), slot) in rows.iter().zip(&slots) {
            assert_eq!(feats.dim(), slot.inputs.len());
            assert_eq!(feats.len(), geom.interior.len());
            assert_eq!(targets.len(), geom.interior.len());
        }
    }
}

#[test]
fn robustness_curves_cover_the_beta_grid() {
    let mut cfg = pendulum(Method::KernelPolynomial, 1);
    cfg.betas = vec![0.0, 0.5, 1.0];
    cfg.robustness_methods = vec![Method::Sindy, Method::KernelPolynomial];
    let report = run_discovery_robustness(&cfg).unwrap();
    assert_eq!(report.rows.len(), 6);
    for m in [Method::Sindy, Method::KernelPolynomial] {
        let curve = report.curve(m);
        assert_eq!(curve.len(), 3);
        assert!(
            curve.iter().all(|e| e.is_finite() && *e >= 0.0 && *e < 1e-2),
            "{m}: {curve:?}"
        );
    }
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("beta.csv");
    emit_beta_csv(&report, &path).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().next(), Some("beta,method,error"));
    assert_eq!(text.lines().count(), 7);
}

#[test]
fn darcy_robustness_is_a_config_error() {
    let cfg = ExperimentConfig::new(ProblemId::Darcy, Method::KernelArd);
    let err = run_discovery_robustness(&cfg).unwrap_err();
    assert!(err.is_config(), "{err}");
}

#[test]
fn unavailable_preset_is_reported() {
    let mut cfg = ExperimentConfig::new(ProblemId::Diffusion, Method::KernelPolynomial);
    cfg.train_size = 20;
    cfg.noise_ratio = 0.1;
    cfg.test_cases = 1;
    let err = run_operator_learning(&cfg).unwrap_err();
    assert!(matches!(err.root(), Error::PresetUnavailable(_)), "{err}");
}

#[test]
fn cv_mode_records_the_search() {
    let mut cfg = pendulum(Method::KernelArd, 2);
    cfg.hyper_mode = HyperMode::Cv;
    let report = run_operator_learning(&cfg).unwrap();
    let cv = report.metadata.cv.as_ref().expect("cv table");
    assert_eq!(cv.table.len(), 25);
    assert!(cv.table.iter().any(|r| r.params == cv.best));
}
