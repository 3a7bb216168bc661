//! Fans runs out to a worker pool and merges them in a fixed order.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::env::{run_bandit, Algorithm, EnvConfig, Environment, Hyperparams, Rule, RunOptions, RunResult};
use crate::rng;

use super::config::{AlgorithmSpec, ExperimentConfig};
use super::metrics::{mean_std, summarize, FinalRegret, SummaryTable};
use super::output::{create, final_regrets, write_env_dir, write_summary};
use super::HarnessError;

/// Runs of one environment, ordered by `(algorithm as listed, repetition)`.
#[derive(Debug, Clone)]
pub struct EnvOutcome {
    pub label: String,
    pub config: EnvConfig,
    pub runs: Vec<RunResult>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub envs: Vec<EnvOutcome>,
}

impl ExperimentResult {
    pub fn final_regrets(&self) -> Vec<FinalRegret> {
        self.envs.iter().flat_map(|e| final_regrets(&e.runs, &e.label)).collect()
    }

    pub fn summary(&self) -> Result<SummaryTable, HarnessError> {
        summarize(&self.final_regrets())
    }

    pub fn env(&self, label: &str) -> Option<&EnvOutcome> {
        self.envs.iter().find(|e| e.label == label)
    }
}

/// Master seed of the `index`-th of `count` environments. A lone environment
/// uses the experiment seed unchanged.
pub fn env_seed(master: u64, index: usize, count: usize) -> u64 {
    use rand::RngCore;
    if count <= 1 {
        master
    } else {
        rng::derive(master, &[u64::MAX, index as u64]).next_u64()
    }
}

/// Runs `f` on a pool of `workers` threads, or the default pool size
/// (available parallelism) when `None`.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, HarnessError> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| HarnessError::Pool(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn build_envs(cfg: &ExperimentConfig) -> Result<Vec<Vec<Environment>>, HarnessError> {
    let count = cfg.environments.len();
    let jobs: Vec<(usize, u64)> = (0..count).flat_map(|i| (0..cfg.repetitions as u64).map(move |r| (i, r))).collect();
    let built =
        jobs.par_iter()
            .map(|&(i, rep)| {
                let named = &cfg.environments[i];
                Environment::build(named.config, env_seed(cfg.seed, i, count), rep).map_err(|source| {
                    HarnessError::Run { env: named.label.clone(), algorithm: Algorithm::Random, rep, source }
                })
            })
            .collect::<Vec<_>>();
    let mut out: Vec<Vec<Environment>> = (0..count).map(|_| Vec::with_capacity(cfg.repetitions)).collect();
    for ((i, _), env) in jobs.into_iter().zip(built) {
        out[i].push(env?);
    }
    Ok(out)
}

/// Every `(environment, algorithm, repetition)` run of `cfg`.
///
/// The first failing run in merge order is reported, with its round.
pub fn run_experiment(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<ExperimentResult, HarnessError> {
    with_workers(workers, || run_inner(cfg))?
}

fn run_inner(cfg: &ExperimentConfig) -> Result<ExperimentResult, HarnessError> {
    let envs = build_envs(cfg)?;
    let count = cfg.environments.len();
    let jobs: Vec<(usize, &AlgorithmSpec, u64)> = (0..count)
        .flat_map(|i| {
            cfg.algorithms.iter().flat_map(move |spec| (0..cfg.repetitions as u64).map(move |rep| (i, spec, rep)))
        })
        .collect();
    let results: Vec<Result<RunResult, HarnessError>> = jobs
        .par_iter()
        .map(|&(i, spec, rep)| {
            run_bandit(
                spec.algorithm,
                &envs[i][rep as usize],
                &spec.hyperparams,
                env_seed(cfg.seed, i, count),
                rep,
                RunOptions::default(),
            )
            .map_err(|source| HarnessError::Run {
                env: cfg.environments[i].label.clone(),
                algorithm: spec.algorithm,
                rep,
                source,
            })
        })
        .collect();

    let mut outcomes: Vec<EnvOutcome> = cfg
        .environments
        .iter()
        .map(|e| EnvOutcome { label: e.label.clone(), config: e.config, runs: Vec::new() })
        .collect();
    for (&(i, _, _), result) in jobs.iter().zip(results) {
        outcomes[i].runs.push(result?);
    }
    Ok(ExperimentResult { envs: outcomes })
}

/// Writes every output file of an experiment and returns its summary.
pub fn write_experiment(result: &ExperimentResult, out: &Path) -> Result<SummaryTable, HarnessError> {
    let single = result.envs.len() == 1;
    for e in &result.envs {
        let dir = if single { out.to_path_buf() } else { out.join(&e.label) };
        write_env_dir(&dir, &e.runs)?;
        if !single {
            let table = summarize(&final_regrets(&e.runs, &e.label))?;
            write_summary(&table, create(&dir.join("summary.csv"))?)?;
        }
    }
    let table = result.summary()?;
    write_summary(&table, create(&out.join("summary.csv"))?)?;
    Ok(table)
}

// ── Hyperparameter sweeps ───────────────────────────────────────────────

/// Values tried for each tuned hyperparameter.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperGrid {
    /// `nu` for Thompson sampling, `beta` for UCB and elimination.
    pub exploration: Vec<f64>,
    pub learning_rate: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl HyperGrid {
    /// The `paper-grid` preset.
    pub fn paper() -> Self {
        Self {
            exploration: vec![0.01, 0.1, 1.0, 10.0],
            learning_rate: vec![1e-1, 1e-2, 1e-3, 1e-4],
            lambda: vec![1e-1, 1e-2, 1e-3, 1e-4],
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper-grid" => Some(Self::paper()),
            _ => None,
        }
    }

    fn combos(&self, base: &Hyperparams, rule: Rule, fixed_exploration: Option<f64>) -> Vec<Hyperparams> {
        if rule == Rule::Uniform {
            return vec![*base];
        }
        let explore = fixed_exploration.map_or_else(|| self.exploration.clone(), |v| vec![v]);
        let mut out = Vec::new();
        for &x in &explore {
            for &lr in &self.learning_rate {
                for &lambda in &self.lambda {
                    let mut hp = *base;
                    match rule {
                        Rule::Thompson => hp.nu = x,
                        _ => hp.beta = x,
                    }
                    hp.trainer.learning_rate = lr;
                    hp.lambda = lambda;
                    out.push(hp);
                }
            }
        }
        out
    }
}

fn exploration_of(rule: Rule, hp: &Hyperparams) -> f64 {
    match rule {
        Rule::Thompson => hp.nu,
        _ => hp.beta,
    }
}

/// The graph-network algorithm sharing a selection rule with `alg`.
fn graph_counterpart(alg: Algorithm) -> Option<Algorithm> {
    match alg {
        Algorithm::NnTs => Some(Algorithm::GnnTs),
        Algorithm::NnUcb => Some(Algorithm::GnnUcb),
        Algorithm::NnPe => Some(Algorithm::GnnPe),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub env: String,
    pub algorithm: Algorithm,
    pub hyperparams: Hyperparams,
    /// Final regret per repetition.
    pub regrets: Vec<f64>,
}

impl SweepEntry {
    pub fn mean(&self) -> f64 {
        mean_std(&self.regrets).0
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub entries: Vec<SweepEntry>,
    /// Index into `entries` of the best setting per `(environment, algorithm)`.
    pub best: Vec<usize>,
    /// Metrics of the best settings.
    pub summary: SummaryTable,
}

/// Grid search per environment and algorithm, keeping the setting with the
/// lowest mean final regret (the first listed on ties).
///
/// Plain-network variants reuse the exploration value picked for their graph
/// counterpart when that one is part of the experiment, and only tune the
/// learning rate and regularizer.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    grid: &HyperGrid,
    workers: Option<usize>,
) -> Result<SweepResult, HarnessError> {
    with_workers(workers, || sweep_inner(cfg, grid))?
}

fn sweep_inner(cfg: &ExperimentConfig, grid: &HyperGrid) -> Result<SweepResult, HarnessError> {
    let envs = build_envs(cfg)?;
    let count = cfg.environments.len();
    let listed: Vec<Algorithm> = cfg.algorithms.iter().map(|s| s.algorithm).collect();
    let deferred = |a: Algorithm| graph_counterpart(a).is_some_and(|g| listed.contains(&g));

    let mut entries: Vec<SweepEntry> = Vec::new();
    let mut best: Vec<usize> = Vec::new();
    for phase in [false, true] {
        let mut candidates: Vec<(usize, Algorithm, Hyperparams)> = Vec::new();
        for i in 0..count {
            let label = &cfg.environments[i].label;
            for spec in cfg.algorithms.iter().filter(|s| deferred(s.algorithm) == phase) {
                let fixed = if phase {
                    let g = graph_counterpart(spec.algorithm).expect("deferred algorithms have a counterpart");
                    let b = best
                        .iter()
                        .map(|&k| &entries[k])
                        .find(|e| &e.env == label && e.algorithm == g)
                        .expect("counterpart swept in the first phase");
                    Some(exploration_of(g.rule(), &b.hyperparams))
                } else {
                    None
                };
                for hp in grid.combos(&spec.hyperparams, spec.algorithm.rule(), fixed) {
                    candidates.push((i, spec.algorithm, hp));
                }
            }
        }
        let jobs: Vec<(usize, u64)> =
            (0..candidates.len()).flat_map(|c| (0..cfg.repetitions as u64).map(move |r| (c, r))).collect();
        let finals = jobs
            .par_iter()
            .map(|&(c, rep)| {
                let (i, alg, hp) = &candidates[c];
                run_bandit(*alg, &envs[*i][rep as usize], hp, env_seed(cfg.seed, *i, count), rep, RunOptions::default())
                    .map(|r| r.final_regret())
                    .map_err(|source| HarnessError::Run {
                        env: cfg.environments[*i].label.clone(),
                        algorithm: *alg,
                        rep,
                        source,
                    })
            })
            .collect::<Vec<_>>();
        let first = entries.len();
        for (i, alg, hp) in &candidates {
            entries.push(SweepEntry {
                env: cfg.environments[*i].label.clone(),
                algorithm: *alg,
                hyperparams: *hp,
                regrets: Vec::with_capacity(cfg.repetitions),
            });
        }
        for (&(c, _), r) in jobs.iter().zip(finals) {
            entries[first + c].regrets.push(r?);
        }
        for k in first..entries.len() {
            let e = &entries[k];
            match best.iter().position(|&b| entries[b].env == e.env && entries[b].algorithm == e.algorithm) {
                Some(pos) if e.mean() < entries[best[pos]].mean() => best[pos] = k,
                Some(_) => {}
                None => best.push(k),
            }
        }
    }

    let finals: Vec<FinalRegret> = best
        .iter()
        .flat_map(|&k| {
            let e = &entries[k];
            e.regrets.iter().enumerate().map(move |(rep, &regret)| FinalRegret {
                env: e.env.clone(),
                rep: rep as u64,
                algorithm: e.algorithm,
                regret,
            })
        })
        .collect();
    Ok(SweepResult { summary: summarize(&finals)?, entries, best })
}

/// `sweep.csv` with every setting, `best.csv` with the winners and
/// `summary.csv` with their metrics.
pub fn write_sweep(result: &SweepResult, out: &Path) -> Result<(), HarnessError> {
    let header = "env,alg,nu,beta,learning_rate,lambda,mean_regret,std_regret";
    let line = |e: &SweepEntry| {
        let (m, s) = mean_std(&e.regrets);
        format!(
            "{},{},{},{},{},{},{},{}",
            e.env,
            e.algorithm,
            e.hyperparams.nu,
            e.hyperparams.beta,
            e.hyperparams.trainer.learning_rate,
            e.hyperparams.lambda,
            m,
            s
        )
    };
    for (name, items) in [
        ("sweep.csv", result.entries.iter().collect::<Vec<_>>()),
        ("best.csv", result.best.iter().map(|&k| &result.entries[k]).collect()),
    ] {
        let path = out.join(name);
        let mut w = create(&path)?;
        writeln!(w, "{header}").map_err(HarnessError::io(&path))?;
        for e in items {
            writeln!(w, "{}", line(e)).map_err(HarnessError::io(&path))?;
        }
        w.flush().map_err(HarnessError::io(&path))?;
    }
    write_summary(&result.summary, create(&out.join("summary.csv"))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_grid_has_64_settings_per_learner() {
        let g = HyperGrid::paper();
        assert_eq!(g.combos(&Hyperparams::default(), Rule::Thompson, None).len(), 64);
        assert_eq!(g.combos(&Hyperparams::default(), Rule::Ucb, Some(0.1)).len(), 16);
        assert_eq!(g.combos(&Hyperparams::default(), Rule::Uniform, None).len(), 1);
        let ucb = g.combos(&Hyperparams::default(), Rule::Ucb, None);
        assert!(ucb.iter().all(|h| h.nu == 1.0));
        assert_eq!(ucb[0].beta, 0.01);
    }

    #[test]
    fn lone_environment_keeps_the_seed() {
        assert_eq!(env_seed(7, 0, 1), 7);
        assert_ne!(env_seed(7, 0, 2), env_seed(7, 1, 2));
    }
}
