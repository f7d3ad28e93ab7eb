use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kernel_pde::datagen::{generate_set, write_dataset, TEST_STREAM_OFFSET};
use kernel_pde::experiment::{
    discover, emit_beta_csv, emit_report, run_discovery_robustness, run_operator_learning, solve_test_case, tune,
    Discovery, ExperimentConfig, ExperimentKind, HyperMode, Method, ReportFormat,
};
use kernel_pde::{Error, LearnedEquation, ProblemId, Result};

#[derive(Parser)]
#[command(
    name = "kpde",
    version,
    about = "Kernel methods for PDE discovery and operator learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run(ExperimentArgs),
    /// Write training or test pairs as CSV files plus a manifest.
    GenerateData(DataArgs),
    /// Learn the equation from training data and save it as JSON.
    Discover(ExperimentArgs),
    /// Solve a saved equation for one test source and write the solution as CSV.
    Solve(SolveArgs),
    /// Operator learning over the test set.
    OperatorBench(ExperimentArgs),
    /// Discovery error as the source distribution shifts.
    Robustness(ExperimentArgs),
    /// Cross-validate the equation-learning hyperparameters.
    Tune(ExperimentArgs),
}

#[derive(Args, Clone)]
struct ExperimentArgs {
    /// JSON config file. Without one, defaults are used for the given problem.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    problem: Option<ProblemId>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<Method>,
    /// Number of training pairs.
    #[arg(long = "I", value_name = "I")]
    train_size: Option<usize>,
    /// Noise-to-signal ratio of the training data.
    #[arg(long)]
    noise: Option<f64>,
    /// Use cross-validated hyperparameters instead of presets.
    #[arg(long)]
    cv: bool,
    /// Number of test sources.
    #[arg(long)]
    test_cases: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    problem: ProblemId,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Draw from the test streams instead of the training streams.
    #[arg(long)]
    test: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    /// Equation file written by `discover`.
    #[arg(long)]
    equation: PathBuf,
    /// Index of the test source.
    #[arg(long, default_value_t = 0)]
    case: u64,
    #[arg(long)]
    out: PathBuf,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::new(
                self.problem
                    .ok_or_else(|| Error::Config("either --config or --problem is required".into()))?,
                Method::KernelPolynomial,
            ),
        };
        if let Some(p) = self.problem {
            cfg.problem = p;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(i) = self.train_size {
            cfg.train_size = i;
        }
        if let Some(n) = self.noise {
            cfg.noise_ratio = n;
        }
        if self.cv {
            cfg.hyper_mode = HyperMode::Cv;
        }
        if let Some(t) = self.test_cases {
            cfg.test_cases = t;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = Some(o.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn operator_bench(cfg: &ExperimentConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let mut methods = vec![cfg.method];
    // Noisy runs report both kernels.
    if cfg.noise_ratio > 0.0 && cfg.method != Method::Sindy {
        let other = match cfg.method {
            Method::KernelArd => Method::KernelPolynomial,
            _ => Method::KernelArd,
        };
        methods.push(other);
    }
    for (k, method) in methods.into_iter().enumerate() {
        let mut run = cfg.clone();
        run.method = method;
        if k > 0 {
            run.learner = None;
        }
        let report = match run_operator_learning(&run) {
            Ok(r) => r,
            Err(e) if k > 0 && e.is_config() => {
                eprintln!("{method}: skipped ({e})");
                continue;
            }
            Err(e) => return Err(e),
        };
        let json = dir.join(format!("report-{method}.json"));
        emit_report(&report, ReportFormat::Json, &json)?;
        emit_report(&report, ReportFormat::Csv, &dir.join(format!("report-{method}.csv")))?;
        println!(
            "{} {method} I={} noise={}: mean {:.3e} std {:.3e} over {} cases -> {}",
            run.problem,
            run.train_size,
            run.noise_ratio,
            report.mean,
            report.std,
            report.per_case.len(),
            json.display()
        );
    }
    Ok(())
}

fn robustness(cfg: &ExperimentConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let report = run_discovery_robustness(cfg)?;
    fs::write(dir.join("robustness.json"), serde_json::to_string_pretty(&report)?)?;
    emit_beta_csv(&report, &dir.join("robustness.csv"))?;
    for method in &cfg.robustness_methods {
        let curve: Vec<String> = report.curve(*method).iter().map(|e| format!("{e:.3e}")).collect();
        println!("{method}: {}", curve.join(" "));
    }
    Ok(())
}

fn run_discover(cfg: &ExperimentConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let d = discover(cfg)?;
    let path = dir.join("equation.json");
    fs::write(&path, d.to_json()?)?;
    for (k, (eq, err)) in d.equations.iter().zip(&d.training_error).enumerate() {
        println!(
            "equation {k}: features [{}], training error {err:.3e}",
            eq.feature_layout().join(", ")
        );
        if let LearnedEquation::SparseDictionary {
            dictionary,
            coefficients,
            ..
        } = eq
        {
            for (name, c) in dictionary.names.iter().zip(coefficients) {
                if *c != 0.0 {
                    println!("  {c:+.6e} {name}");
                }
            }
        }
    }
    println!("-> {}", path.display());
    Ok(())
}

fn run_solve(args: &SolveArgs) -> Result<()> {
    let d = Discovery::from_json(&fs::read_to_string(&args.equation)?)?;
    let sol = solve_test_case(&d.config, &d.equations, args.case)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_file(&args.out, |w| sol.write_csv(w))?;
    println!(
        "case {}: relative error {:.3e}, {} iterations, converged {} -> {}",
        args.case,
        sol.relative_error,
        sol.iterations,
        sol.converged,
        args.out.display()
    );
    Ok(())
}

fn run_tune(cfg: &ExperimentConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let (learner, cv) = tune(cfg)?;
    write_file(&dir.join("scores.csv"), |w| cv.write_csv(w))?;
    fs::write(dir.join("learner.json"), serde_json::to_string_pretty(&learner)?)?;
    let best: Vec<String> = cv
        .names
        .iter()
        .zip(&cv.best)
        .map(|(n, v)| format!("{n}={v:.3e}"))
        .collect();
    println!("best {} (score {:.3e})", best.join(" "), cv.best_score);
    Ok(())
}

fn generate(args: &DataArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::new(args.problem, Method::KernelPolynomial);
    cfg.noise_ratio = args.noise;
    cfg.validate()?;
    let first = if args.test { TEST_STREAM_OFFSET } else { 0 };
    let set = generate_set(args.problem, &cfg.data, args.count, args.seed, first, args.noise)?;
    let manifest = write_dataset(&args.out, &set, &cfg.data, first)?;
    println!("{} pairs -> {}", manifest.count, args.out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(a) => {
            let cfg = a.resolve()?;
            match cfg.experiment {
                ExperimentKind::OperatorLearning => operator_bench(&cfg),
                ExperimentKind::Robustness => robustness(&cfg),
            }
        }
        Command::GenerateData(a) => generate(&a),
        Command::Discover(a) => run_discover(&a.resolve()?),
        Command::Solve(a) => run_solve(&a),
        Command::OperatorBench(a) => operator_bench(&a.resolve()?),
        Command::Robustness(a) => robustness(&a.resolve()?),
        Command::Tune(a) => run_tune(&a.resolve()?),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
