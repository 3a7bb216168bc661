use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use graphbandit::env::{Algorithm, Environment, Hyperparams};
use graphbandit::harness::config::{parse_config, ExperimentConfig, ValidationError};
use graphbandit::harness::diagnostics::{effdim_of, gntk_report, gradcheck, potential_check, GradcheckOptions};
use graphbandit::harness::experiment::{run_experiment, run_sweep, write_experiment, write_sweep, HyperGrid};
use graphbandit::harness::metrics::{summarize, SummaryTable};
use graphbandit::harness::output::{final_regrets_from_raw, read_raw_file, write_summary};
use graphbandit::HarnessError;

/// Graph-action bandit experiments.
#[derive(Debug, Parser)]
#[command(name = "graphbandit", version)]
struct Cli {
    /// Master seed; overrides the one in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every algorithm and repetition of an experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads (default: available parallelism).
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the horizon of every environment.
        #[arg(long)]
        horizon: Option<usize>,
        /// Override the number of repetitions.
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Grid search over exploration, learning rate and regularization.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        preset: String,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Empirical tangent kernel of the first repetition's action space.
    Gntk {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Effective dimension of the empirical tangent kernel.
    Effdim {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        horizon: usize,
        #[arg(long)]
        lambda: f64,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, value_delimiter = ',', default_values_t = vec![2, 3])]
        layers: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        pairs: usize,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
    },
    /// Check the elliptical potential inequality on one full-inverse run.
    Potential {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Recompute the summary of a raw results file.
    Report {
        #[arg(long)]
        raw: PathBuf,
        /// Also write the summary CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Outcome of a subcommand that completed but whose check failed.
struct CheckFailed;

enum Failure {
    Harness(HarnessError),
    Check,
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure::Harness(e)
    }
}

impl From<CheckFailed> for Failure {
    fn from(_: CheckFailed) -> Self {
        Failure::Check
    }
}

fn invalid(problem: impl Into<String>) -> HarnessError {
    HarnessError::Validation(ValidationError { problems: vec![problem.into()] })
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = parse_config(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Hyperparameters of the first learning algorithm, falling back to the
/// defaults when only the random baseline is configured.
fn model_of(cfg: &ExperimentConfig) -> Hyperparams {
    cfg.spec(Algorithm::GnnTs)
        .or_else(|| cfg.algorithms.iter().find(|s| s.algorithm != Algorithm::Random))
        .map(|s| s.hyperparams)
        .unwrap_or_default()
}

fn first_env(cfg: &ExperimentConfig) -> Result<Environment, HarnessError> {
    let named = cfg.environments.first().ok_or_else(|| invalid("no environment configured"))?;
    Ok(Environment::build(named.config, cfg.seed, 0)?)
}

fn print_summary(table: &SummaryTable) {
    println!("{:<28} {:<8} {:>5} {:>12} {:>10} {:>9} {:>8}", "env", "alg", "reps", "mean", "std", "relative", "top");
    for r in &table.rows {
        let top = r.top_rate.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        println!(
            "{:<28} {:<8} {:>5} {:>12.4} {:>10.4} {:>9.4} {:>8}",
            r.env,
            r.alg.name(),
            r.reps,
            r.mean_regret,
            r.std_regret,
            r.relative_regret,
            top
        );
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, workers, out, horizon, reps } => {
            let mut cfg = load(&config, cli.seed)?;
            if let Some(t) = horizon {
                if t == 0 {
                    return Err(invalid("--horizon must be >= 1").into());
                }
                cfg = cfg.with_horizon(t);
            }
            if let Some(r) = reps {
                if r == 0 {
                    return Err(invalid("--reps must be >= 1").into());
                }
                cfg.repetitions = r;
            }
            if workers == Some(0) {
                return Err(invalid("--workers must be >= 1").into());
            }
            let out = out.unwrap_or_else(|| cfg.out.clone());
            let start = Instant::now();
            let result = run_experiment(&cfg, workers)?;
            let table = write_experiment(&result, &out)?;
            print_summary(&table);
            eprintln!("wrote {} in {:.1?}", out.display(), start.elapsed());
        }
        Command::Sweep { config, preset, workers, out } => {
            let cfg = load(&config, cli.seed)?;
            let grid = HyperGrid::preset(&preset)
                .ok_or_else(|| invalid(format!("--preset: unknown preset {preset:?} (expected paper-grid)")))?;
            if workers == Some(0) {
                return Err(invalid("--workers must be >= 1").into());
            }
            let out = out.unwrap_or_else(|| cfg.out.join("sweep"));
            let result = run_sweep(&cfg, &grid, workers)?;
            write_sweep(&result, &out)?;
            for &k in &result.best {
                let e = &result.entries[k];
                println!(
                    "{} {}: nu={} beta={} lr={} lambda={} mean regret {:.4}",
                    e.env,
                    e.algorithm,
                    e.hyperparams.nu,
                    e.hyperparams.beta,
                    e.hyperparams.trainer.learning_rate,
                    e.hyperparams.lambda,
                    e.mean()
                );
            }
            print_summary(&result.summary);
        }
        Command::Gntk { config, out } => {
            let cfg = load(&config, cli.seed)?;
            let hp = model_of(&cfg);
            let env = first_env(&cfg)?;
            let report = gntk_report(&env.graph_features, hp.layers, hp.width, cfg.seed)?;
            let out = out.unwrap_or_else(|| cfg.out.clone());
            std::fs::create_dir_all(&out).map_err(|e| HarnessError::Io { path: out.clone(), source: e })?;
            let kpath = out.join("gntk.csv");
            let file =
                std::fs::File::create(&kpath).map_err(|e| HarnessError::Io { path: kpath.clone(), source: e })?;
            report
                .kernel
                .write_csv(std::io::BufWriter::new(file))
                .map_err(|e| HarnessError::Io { path: kpath.clone(), source: e })?;
            let spath = out.join("spectrum.csv");
            let mut text = String::from("index,eigenvalue\n");
            for (i, v) in report.spectrum.iter().enumerate() {
                text.push_str(&format!("{i},{v}\n"));
            }
            std::fs::write(&spath, text).map_err(|e| HarnessError::Io { path: spath.clone(), source: e })?;
            println!("graphs {}", report.kernel.len());
            println!("max asymmetry before symmetrizing {:e}", report.asymmetry);
            println!("eigenvalues min {:e} max {:e}", report.min_eigenvalue(), report.max_eigenvalue());
            println!("psd {}", report.is_psd());
            println!("wrote {} and {}", kpath.display(), spath.display());
        }
        Command::Effdim { config, horizon, lambda } => {
            if horizon == 0 {
                return Err(invalid("--horizon must be >= 1").into());
            }
            if !(lambda > 0.0) {
                return Err(invalid(format!("--lambda must be > 0, got {lambda}")).into());
            }
            let cfg = load(&config, cli.seed)?;
            let hp = model_of(&cfg);
            let env = first_env(&cfg)?;
            let report = gntk_report(&env.graph_features, hp.layers, hp.width, cfg.seed)?;
            let d = effdim_of(&report, horizon, lambda)?;
            println!("effective dimension {d} (of {} graphs)", report.kernel.len());
        }
        Command::Gradcheck { width, layers, pairs, step } => {
            if !(step > 0.0) {
                return Err(invalid(format!("--step must be > 0, got {step}")).into());
            }
            let opts = GradcheckOptions { layers, width, pairs, step, ..GradcheckOptions::default() };
            let r = gradcheck(&opts, cli.seed.unwrap_or(0))?;
            println!("max relative error {:e}", r.max_rel_error);
            println!("coordinates checked {} skipped at kinks {}", r.checked, r.skipped);
            let ok = r.max_rel_error < 1e-4;
            println!("{}", if ok { "PASS" } else { "FAIL" });
            if !ok {
                return Err(CheckFailed.into());
            }
        }
        Command::Potential { config, horizon } => {
            let mut cfg = load(&config, cli.seed)?;
            if let Some(t) = horizon {
                if t == 0 {
                    return Err(invalid("--horizon must be >= 1").into());
                }
                cfg = cfg.with_horizon(t);
            }
            let hp = model_of(&cfg);
            if hp.width > 128 {
                return Err(invalid(format!(
                    "potential keeps the full inverse; width must be <= 128, got {}",
                    hp.width
                ))
                .into());
            }
            let env = first_env(&cfg)?;
            let check = potential_check(&env, &hp, cfg.seed, 0)?;
            println!("sum of min(1, sigma^2)        {}", check.report.lhs);
            println!("2 log det growth (rank-one)   {}", check.report.rhs);
            println!("2 log det growth (dense)      {}", check.dense_rhs);
            let ok = check.holds();
            println!("{}", if ok { "PASS" } else { "FAIL" });
            if !ok {
                return Err(CheckFailed.into());
            }
        }
        Command::Report { raw, out } => {
            let rows = read_raw_file(&raw)?;
            let table = summarize(&final_regrets_from_raw(&rows, "env")?)?;
            print_summary(&table);
            if let Some(path) = out {
                let file =
                    std::fs::File::create(&path).map_err(|e| HarnessError::Io { path: path.clone(), source: e })?;
                write_summary(&table, std::io::BufWriter::new(file))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let code = match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check) => ExitCode::from(2),
        Err(Failure::Harness(e)) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    };
    let _ = std::io::stdout().flush();
    code
}
