//! Experiment configuration files.
//!
//! A config is a TOML document with the sections `[environment]`, `[run]`,
//! `[model]`, `[policy]`, an optional `[grid]` of environment axes and
//! optional per-algorithm `[overrides."NAME"]` tables. Unknown keys are
//! rejected, missing ones take the defaults below, and validation reports
//! every violated constraint at once.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{Algorithm, EnvConfig, Hyperparams, PretrainConfig, RewardSpec};
use crate::graph::GraphKind;
use crate::policy::InverseMode;
use crate::train::{LossScaling, Optimizer, PenaltyCenter, TrainerConfig};

use super::HarnessError;

pub const DEFAULT_LAYERS: usize = 2;
pub const DEFAULT_WIDTH: usize = 512;
pub const DEFAULT_NOISE_STD: f64 = 0.01;
pub const DEFAULT_HORIZON: usize = 1000;
pub const DEFAULT_REPETITIONS: usize = 10;

#[derive(Debug, Default, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub environment: Option<RawEnvironment>,
    pub run: Option<RawRun>,
    pub model: Option<RawModel>,
    pub policy: Option<RawPolicy>,
    pub grid: Option<RawGrid>,
    pub overrides: Option<BTreeMap<String, RawOverride>>,
}

#[derive(Debug, Default, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RawEnvironment {
    /// `er` or `rdpg`.
    pub graph: Option<String>,
    pub p: Option<f64>,
    pub nodes: Option<usize>,
    pub actions: Option<usize>,
    pub feature_dim: Option<usize>,
    /// `linear`, `gp_gntk` or `gp_rep`.
    pub reward: Option<String>,
    pub noise_std: Option<f64>,
    pub reward_layers: Option<usize>,
    pub reward_width: Option<usize>,
    pub obs_var: Option<f64>,
    pub pretrain_learning_rate: Option<f64>,
    pub pretrain_epochs: Option<usize>,
    pub pretrain_batch_size: Option<usize>,
    pub jitter: Option<f64>,
}

#[derive(Debug, Default, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RawRun {
    pub horizon: Option<usize>,
    pub repetitions: Option<usize>,
    pub algorithms: Option<Vec<String>>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RawModel {
    pub layers: Option<usize>,
    pub width: Option<usize>,
    pub lambda: Option<f64>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    /// `sgd` or `adam`.
    pub optimizer: Option<String>,
    /// Retrain from the initialization every round instead of continuing.
    pub cold_restart: Option<bool>,
    /// `batch` or `history`.
    pub loss_scaling: Option<String>,
    /// `origin` or `initial`.
    pub penalty_center: Option<String>,
    /// `diagonal` or `full`.
    pub inverse_mode: Option<String>,
    pub initial_gradients: Option<bool>,
    pub train_every: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RawPolicy {
    pub nu: Option<f64>,
    pub beta: Option<f64>,
}

/// Model and policy keys that may be set per algorithm.
#[derive(Debug, Default, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RawOverride {
    #[serde(flatten)]
    pub model: RawModel,
    pub nu: Option<f64>,
    pub beta: Option<f64>,
}

/// Environment axes expanded as a Cartesian product.
#[derive(Debug, Default, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RawGrid {
    pub graph: Option<Vec<String>>,
    pub p: Option<Vec<f64>>,
    pub nodes: Option<Vec<usize>>,
    pub actions: Option<Vec<usize>>,
    pub reward: Option<Vec<String>>,
}

/// A labelled environment of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedEnv {
    pub label: String,
    pub config: EnvConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmSpec {
    pub algorithm: Algorithm,
    pub hyperparams: Hyperparams,
}

/// Fully resolved and validated experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub environments: Vec<NamedEnv>,
    pub repetitions: usize,
    pub algorithms: Vec<AlgorithmSpec>,
    pub seed: u64,
    pub out: PathBuf,
}

impl ExperimentConfig {
    pub fn horizon(&self) -> usize {
        self.environments.first().map_or(0, |e| e.config.horizon)
    }

    /// Same experiment with every environment's horizon replaced.
    pub fn with_horizon(mut self, horizon: usize) -> Self {
        for e in &mut self.environments {
            e.config.horizon = horizon;
        }
        self
    }

    pub fn spec(&self, alg: Algorithm) -> Option<&AlgorithmSpec> {
        self.algorithms.iter().find(|s| s.algorithm == alg)
    }
}

/// Constraint violations found while resolving a config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationError {
    pub problems: Vec<String>,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} problem(s) in configuration:", self.problems.len())?;
        for p in &self.problems {
            writeln!(f, "  - {p}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationError {}

/// Reads, parses and validates `path`.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io { path: path.to_path_buf(), source: e })?;
    parse_config_str(&text).map_err(|e| match e {
        HarnessError::Parse { message, .. } => HarnessError::Parse { path: path.to_path_buf(), message },
        other => other,
    })
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, HarnessError> {
    let raw: RawConfig =
        toml::from_str(text).map_err(|e| HarnessError::Parse { path: PathBuf::new(), message: e.to_string() })?;
    resolve(&raw).map_err(HarnessError::Validation)
}

fn parse_choice<T: Copy>(field: &str, value: &str, options: &[(&str, T)], problems: &mut Vec<String>) -> Option<T> {
    match options.iter().find(|(name, _)| name.eq_ignore_ascii_case(value)) {
        Some(&(_, v)) => Some(v),
        None => {
            let names: Vec<_> = options.iter().map(|(n, _)| *n).collect();
            problems.push(format!("{field}: unknown value {value:?} (expected one of {})", names.join(", ")));
            None
        }
    }
}

fn graph_kind(name: &str, p: f64, field: &str, problems: &mut Vec<String>) -> Option<GraphKind> {
    match name.to_ascii_lowercase().as_str() {
        "er" => Some(GraphKind::Er { p }),
        "rdpg" => Some(GraphKind::Rdpg),
        _ => {
            problems.push(format!("{field}: unknown graph model {name:?} (expected er or rdpg)"));
            None
        }
    }
}

fn reward_spec(name: &str, env: &RawEnvironment, field: &str, problems: &mut Vec<String>) -> Option<RewardSpec> {
    let layers = env.reward_layers.unwrap_or(DEFAULT_LAYERS);
    let width = env.reward_width.unwrap_or(64);
    match name.to_ascii_lowercase().as_str() {
        "linear" => Some(RewardSpec::Linear),
        "gp_gntk" => Some(RewardSpec::GpGntk { layers, width, obs_var: env.obs_var.unwrap_or(1.0) }),
        "gp_rep" => {
            let d = PretrainConfig::default();
            Some(RewardSpec::GpRep(PretrainConfig {
                layers,
                width,
                trainer: TrainerConfig {
                    learning_rate: env.pretrain_learning_rate.unwrap_or(d.trainer.learning_rate),
                    epochs: env.pretrain_epochs.unwrap_or(d.trainer.epochs),
                    batch_size: env.pretrain_batch_size.unwrap_or(d.trainer.batch_size),
                    ..d.trainer
                },
                jitter: env.jitter.unwrap_or(d.jitter),
            }))
        }
        _ => {
            problems.push(format!("{field}: unknown reward generator {name:?} (expected linear, gp_gntk or gp_rep)"));
            None
        }
    }
}

fn apply_model(hp: &mut Hyperparams, m: &RawModel, prefix: &str, problems: &mut Vec<String>) {
    if let Some(v) = m.layers {
        hp.layers = v;
    }
    if let Some(v) = m.width {
        hp.width = v;
    }
    if let Some(v) = m.lambda {
        hp.lambda = v;
    }
    if let Some(v) = m.learning_rate {
        hp.trainer.learning_rate = v;
    }
    if let Some(v) = m.epochs {
        hp.trainer.epochs = v;
    }
    if let Some(v) = m.batch_size {
        hp.trainer.batch_size = v;
    }
    if let Some(v) = m.cold_restart {
        hp.trainer.warm_start = !v;
    }
    if let Some(v) = &m.optimizer {
        let opts = [("sgd", Optimizer::Sgd), ("adam", Optimizer::adam())];
        if let Some(o) = parse_choice(&format!("{prefix}optimizer"), v, &opts, problems) {
            hp.trainer.optimizer = o;
        }
    }
    if let Some(v) = &m.loss_scaling {
        let opts = [("batch", LossScaling::Batch), ("history", LossScaling::History)];
        if let Some(o) = parse_choice(&format!("{prefix}loss_scaling"), v, &opts, problems) {
            hp.trainer.loss_scaling = o;
        }
    }
    if let Some(v) = &m.penalty_center {
        let opts = [("origin", PenaltyCenter::Origin), ("initial", PenaltyCenter::Initial)];
        if let Some(o) = parse_choice(&format!("{prefix}penalty_center"), v, &opts, problems) {
            hp.trainer.penalty_center = o;
        }
    }
    if let Some(v) = &m.inverse_mode {
        let opts = [("diagonal", InverseMode::Diagonal), ("full", InverseMode::Full)];
        if let Some(o) = parse_choice(&format!("{prefix}inverse_mode"), v, &opts, problems) {
            hp.inverse_mode = o;
        }
    }
    if let Some(v) = m.initial_gradients {
        hp.initial_gradients = v;
    }
    if let Some(v) = m.train_every {
        hp.train_every = v;
    }
}

/// Applies defaults and checks every constraint.
pub fn resolve(raw: &RawConfig) -> Result<ExperimentConfig, ValidationError> {
    let mut problems = Vec::new();
    let env = raw.environment.clone().unwrap_or_default();
    let run = raw.run.clone().unwrap_or_default();
    if raw.environment.is_none() {
        problems.push("missing [environment] section".to_string());
    }

    // Base hyperparameters shared by all algorithms.
    let mut base = Hyperparams { layers: DEFAULT_LAYERS, width: DEFAULT_WIDTH, ..Hyperparams::default() };
    if let Some(m) = &raw.model {
        apply_model(&mut base, m, "model.", &mut problems);
    }
    if let Some(p) = &raw.policy {
        if let Some(v) = p.nu {
            base.nu = v;
        }
        if let Some(v) = p.beta {
            base.beta = v;
        }
    }

    // Algorithms.
    let mut algorithms = Vec::new();
    match &run.algorithms {
        None => problems.push("run.algorithms: at least one algorithm is required".to_string()),
        Some(list) if list.is_empty() => problems.push("run.algorithms: list is empty".to_string()),
        Some(list) => {
            for name in list {
                match name.parse::<Algorithm>() {
                    Ok(a) if algorithms.iter().any(|s: &AlgorithmSpec| s.algorithm == a) => {
                        problems.push(format!("run.algorithms: {a} listed twice"));
                    }
                    Ok(a) => algorithms.push(AlgorithmSpec { algorithm: a, hyperparams: base }),
                    Err(e) => problems.push(format!("run.algorithms: {e}")),
                }
            }
        }
    }
    for (name, o) in raw.overrides.iter().flatten() {
        let prefix = format!("overrides.{name}.");
        match name.parse::<Algorithm>() {
            Ok(a) => match algorithms.iter_mut().find(|s| s.algorithm == a) {
                Some(spec) => {
                    apply_model(&mut spec.hyperparams, &o.model, &prefix, &mut problems);
                    if let Some(v) = o.nu {
                        spec.hyperparams.nu = v;
                    }
                    if let Some(v) = o.beta {
                        spec.hyperparams.beta = v;
                    }
                }
                None => problems.push(format!("overrides.{name}: algorithm is not in run.algorithms")),
            },
            Err(e) => problems.push(format!("overrides: {e}")),
        }
    }

    // Environment(s).
    let horizon = run.horizon.unwrap_or(DEFAULT_HORIZON);
    let base_p = env.p.unwrap_or(0.4);
    let feature_dim = env.feature_dim.unwrap_or(10);
    let graphs = match (&raw.grid.as_ref().and_then(|g| g.graph.clone()), &env.graph) {
        (Some(list), _) => list.clone(),
        (None, Some(g)) => vec![g.clone()],
        (None, None) => vec!["er".to_string()],
    };
    let grid = raw.grid.clone().unwrap_or_default();
    let ps = grid.p.clone().unwrap_or_else(|| vec![base_p]);
    let nodes = grid.nodes.clone().unwrap_or_else(|| vec![env.nodes.unwrap_or(20)]);
    let actions = grid.actions.clone().unwrap_or_else(|| vec![env.actions.unwrap_or(30)]);
    let rewards =
        grid.reward.clone().unwrap_or_else(|| vec![env.reward.clone().unwrap_or_else(|| "linear".to_string())]);
    for (name, empty) in [
        ("grid.graph", graphs.is_empty()),
        ("grid.p", ps.is_empty()),
        ("grid.nodes", nodes.is_empty()),
        ("grid.actions", actions.is_empty()),
        ("grid.reward", rewards.is_empty()),
    ] {
        if empty {
            problems.push(format!("{name}: list is empty"));
        }
    }

    let mut environments = Vec::new();
    let multi = [graphs.len(), ps.len(), nodes.len(), actions.len(), rewards.len()].iter().any(|&n| n > 1);
    let mut seen_problems = std::collections::BTreeSet::new();
    for g in &graphs {
        let is_er = g.eq_ignore_ascii_case("er");
        // The edge probability axis only applies to ER graphs.
        let p_axis: Vec<Option<f64>> = if is_er { ps.iter().copied().map(Some).collect() } else { vec![None] };
        for p in &p_axis {
            for &n in &nodes {
                for &k in &actions {
                    for r in &rewards {
                        let mut local = Vec::new();
                        let kind = graph_kind(g, p.unwrap_or(base_p), "environment.graph", &mut local);
                        let reward = reward_spec(r, &env, "environment.reward", &mut local);
                        if let (Some(graph), Some(reward)) = (kind, reward) {
                            let config = EnvConfig {
                                graph,
                                nodes: n,
                                actions: k,
                                feature_dim,
                                reward,
                                noise_std: env.noise_std.unwrap_or(DEFAULT_NOISE_STD),
                                horizon,
                            };
                            local.extend(config.problems().into_iter().map(|e| format!("environment: {e}")));
                            let label = if multi { env_label(&config) } else { "env".to_string() };
                            environments.push(NamedEnv { label, config });
                        }
                        for l in local {
                            if seen_problems.insert(l.clone()) {
                                problems.push(l);
                            }
                        }
                    }
                }
            }
        }
    }

    let repetitions = run.repetitions.unwrap_or(DEFAULT_REPETITIONS);
    if repetitions == 0 {
        problems.push("run.repetitions must be >= 1".to_string());
    }
    for spec in &algorithms {
        if spec.algorithm == Algorithm::Random {
            continue;
        }
        for p in spec.hyperparams.problems(feature_dim) {
            let msg = format!("{}: {p}", spec.algorithm);
            if !problems.contains(&msg) {
                problems.push(msg);
            }
        }
    }

    if problems.is_empty() {
        Ok(ExperimentConfig {
            environments,
            repetitions,
            algorithms,
            seed: run.seed.unwrap_or(0),
            out: run.out.clone().unwrap_or_else(|| PathBuf::from("results")),
        })
    } else {
        Err(ValidationError { problems })
    }
}

/// Short directory-safe name of an environment.
pub fn env_label(cfg: &EnvConfig) -> String {
    let graph = match cfg.graph {
        GraphKind::Er { p } => format!("er-p{p}"),
        GraphKind::Rdpg => "rdpg".to_string(),
    };
    format!("{graph}_n{}_g{}_{}", cfg.nodes, cfg.actions, cfg.reward.tag())
}

/// Text of the `desk` preset.
pub const DESK_PRESET: &str = include_str!("../../../../configs/desk.cfg");

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[environment]
graph = "er"
p = 0.4

[run]
algorithms = ["GNN-TS", "Random"]
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config_str(MINIMAL).unwrap();
        let spec = cfg.spec(Algorithm::GnnTs).unwrap();
        assert_eq!(spec.hyperparams.layers, 2);
        assert_eq!(spec.hyperparams.width, 512);
        assert_eq!(cfg.environments.len(), 1);
        let env = &cfg.environments[0].config;
        assert_eq!(env.noise_std, 0.01);
        assert_eq!(env.horizon, 1000);
        assert_eq!(cfg.repetitions, 10);
    }

    #[test]
    fn unknown_algorithm_names_the_field() {
        let text = MINIMAL.replace("\"Random\"", "\"GNN-XYZ\"");
        match parse_config_str(&text) {
            Err(HarnessError::Validation(v)) => {
                assert!(v.problems.iter().any(|p| p.starts_with("run.algorithms") && p.contains("GNN-XYZ")));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn every_problem_is_reported() {
        let text = r#"
[environment]
noise_std = -1.0
p = 1.5

[run]
algorithms = ["GNN-TS"]
repetitions = 0

[model]
width = 7
"#;
        match parse_config_str(text) {
            Err(HarnessError::Validation(v)) => {
                let all = v.problems.join("\n");
                assert!(all.contains("noise"), "{all}");
                assert!(all.contains("probability"), "{all}");
                assert!(all.contains("repetitions"), "{all}");
                assert!(all.contains("even"), "{all}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_parse_errors_with_location() {
        let text = MINIMAL.replace("p = 0.4", "p = 0.4\nnodez = 3");
        match parse_config_str(&text) {
            Err(HarnessError::Parse { message, .. }) => {
                assert!(message.contains("nodez"), "{message}");
                assert!(message.contains("line"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_apply_per_algorithm() {
        let text = format!("{MINIMAL}\n[policy]\nnu = 0.5\n\n[overrides.\"GNN-TS\"]\nnu = 0.1\nwidth = 16\n");
        let cfg = parse_config_str(&text).unwrap();
        let ts = cfg.spec(Algorithm::GnnTs).unwrap().hyperparams;
        assert_eq!((ts.nu, ts.width), (0.1, 16));
        assert_eq!(cfg.spec(Algorithm::Random).unwrap().hyperparams.nu, 0.5);
    }

    #[test]
    fn unknown_override_keys_are_rejected() {
        let text = format!("{MINIMAL}\n[overrides.\"GNN-TS\"]\nwidht = 16\n");
        assert!(matches!(parse_config_str(&text), Err(HarnessError::Parse { .. })));
        let text = format!("{MINIMAL}\n[overrides.\"NN-TS\"]\nwidth = 16\n");
        assert!(matches!(parse_config_str(&text), Err(HarnessError::Validation(_))));
    }

    #[test]
    fn grid_expands_cartesian_product() {
        let text = format!("{MINIMAL}\n[grid]\np = [0.2, 0.4]\nnodes = [10, 20]\nreward = [\"linear\", \"gp_gntk\"]\n");
        let cfg = parse_config_str(&text).unwrap();
        assert_eq!(cfg.environments.len(), 8);
        let labels: std::collections::BTreeSet<_> = cfg.environments.iter().map(|e| e.label.clone()).collect();
        assert_eq!(labels.len(), 8);
    }

    #[test]
    fn desk_preset_resolves() {
        let cfg = parse_config_str(DESK_PRESET).unwrap();
        let env = &cfg.environments[0].config;
        assert_eq!(env.graph, GraphKind::Er { p: 0.4 });
        assert_eq!((env.nodes, env.actions, env.feature_dim, env.horizon), (20, 30, 10, 400));
        assert_eq!(env.reward, RewardSpec::Linear);
        assert_eq!(cfg.repetitions, 5);
        let ts = cfg.spec(Algorithm::GnnTs).unwrap().hyperparams;
        assert_eq!((ts.layers, ts.width, ts.nu, ts.lambda), (2, 64, 1.0, 1e-3));
    }
}
