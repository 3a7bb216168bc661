//! Reward tables, noisy feedback and the round loop of a bandit run.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gnn::{GnnError, GnnParams, HistoryBuffer};
use crate::graph::{gen_action_space, ActionSpace, AggregatedFeatures, Aggregation, GraphError, GraphKind};
use crate::linalg::{chol, LinalgError, Matrix};
use crate::policy::{
    pe_step, random_select, ts_select, ucb_select, ActiveSet, InverseMode, PolicyError, UncertaintyState,
};
use crate::rng::{self, tag, Stream};
use crate::scalar::{dot, Scalar};
use crate::tangent::{
    empirical_gntk, gp_posterior, mvn_sample, representation_kernel, value_and_tangent, KernelError, TangentFeature,
    ThetaTag,
};
use crate::train::{adam_train, train, Optimizer, TrainerConfig};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("action index {index} out of range for {count} actions")]
    IndexOutOfRange { index: usize, count: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Graph(#[from] GraphError),

    #[error(transparent)]
    Gnn(#[from] GnnError),

    #[error(transparent)]
    Kernel(#[from] KernelError),

    #[error(transparent)]
    Linalg(#[from] LinalgError),

    #[error(transparent)]
    Policy(#[from] PolicyError),

    #[error("round {t}: {source}")]
    Round {
        t: usize,
        #[source]
        source: Box<EnvError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorTag {
    Linear,
    GpGntk,
    GpRep,
}

impl fmt::Display for GeneratorTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GeneratorTag::Linear => "linear",
            GeneratorTag::GpGntk => "gp_gntk",
            GeneratorTag::GpRep => "gp_rep",
        })
    }
}

/// True mean reward of every action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTable {
    pub mu: Vec<f64>,
    pub best_index: usize,
    pub best_value: f64,
    pub generator: GeneratorTag,
}

impl RewardTable {
    pub fn new(mu: Vec<f64>, generator: GeneratorTag) -> Result<Self, EnvError> {
        if mu.is_empty() {
            return Err(EnvError::InvalidConfig("reward table needs at least one action".into()));
        }
        if let Some(bad) = mu.iter().find(|v| !v.is_finite()) {
            return Err(EnvError::InvalidConfig(format!("non-finite mean reward {bad}")));
        }
        let best_index = crate::policy::argmax(&mu).expect("nonempty finite");
        let best_value = mu[best_index];
        Ok(Self { mu, best_index, best_value, generator })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// `mu* - mu(i)`.
    pub fn gap(&self, index: usize) -> Result<f64, EnvError> {
        self.mu
            .get(index)
            .map(|&m| self.best_value - m)
            .ok_or(EnvError::IndexOutOfRange { index, count: self.mu.len() })
    }
}

/// `mu(G) = <theta*, mean_i h_i>` for a given `theta*`.
pub fn linear_reward_with(aggs: &[AggregatedFeatures<f64>], theta_star: &[f64]) -> Result<RewardTable, EnvError> {
    let mu = aggs
        .iter()
        .map(|a| {
            if a.dim() != theta_star.len() {
                return Err(EnvError::InvalidConfig(format!(
                    "theta* has length {} but features have dimension {}",
                    theta_star.len(),
                    a.dim()
                )));
            }
            Ok(dot(theta_star, &a.mean_row()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    RewardTable::new(mu, GeneratorTag::Linear)
}

/// Linear reward with `theta* ~ N(0, I_d)`.
pub fn linear_reward<R: Rng + ?Sized>(aggs: &[AggregatedFeatures<f64>], rng: &mut R) -> Result<RewardTable, EnvError> {
    let d = aggs.first().map(AggregatedFeatures::dim).unwrap_or(0);
    let theta: Vec<f64> = (0..d).map(|_| f64::standard_normal(rng)).collect();
    linear_reward_with(aggs, &theta)
}

/// Posterior draw of a GP with the empirical GNTK as prior covariance,
/// conditioned on i.i.d. standard normal pseudo-labels.
pub fn gp_gntk_reward<R: Rng + ?Sized>(
    aggs: &[AggregatedFeatures<f64>],
    params0: &GnnParams<f64>,
    obs_var: f64,
    rng: &mut R,
) -> Result<RewardTable, EnvError> {
    let k = empirical_gntk(aggs, params0)?;
    let y: Vec<f64> = (0..aggs.len()).map(|_| f64::standard_normal(rng)).collect();
    let (mean, cov) = gp_posterior(&k.entries, &y, obs_var)?;
    let factor = chol(&cov)?;
    let mu = mvn_sample(&mean, &factor, rng)?;
    RewardTable::new(mu, GeneratorTag::GpGntk)
}

/// Settings for the network whose representation defines the GP prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub layers: usize,
    pub width: usize,
    pub trainer: TrainerConfig,
    /// Added to the kernel diagonal before sampling.
    pub jitter: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            width: 64,
            trainer: TrainerConfig {
                learning_rate: 0.01,
                epochs: 30,
                batch_size: 2,
                optimizer: Optimizer::adam(),
                ..TrainerConfig::default()
            },
            jitter: 1e-6,
        }
    }
}

/// Average degrees standardized to zero mean and unit variance (left
/// centered only when all degrees coincide).
fn standardized_degrees(space: &ActionSpace<f64>) -> Vec<f64> {
    let raw: Vec<f64> = space.graphs().iter().map(|g| g.average_degree()).collect();
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let var = raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    raw.iter().map(|v| (v - mean) / sd).collect()
}

/// Zero-mean GP draw whose covariance is the representation Gram matrix of a
/// network pretrained to predict each graph's average degree.
pub fn rep_kernel_reward<R: Rng + ?Sized>(
    space: &ActionSpace<f64>,
    aggs: &[AggregatedFeatures<f64>],
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<RewardTable, EnvError> {
    if aggs.len() != space.len() {
        return Err(EnvError::InvalidConfig("aggregated features do not match the action space".into()));
    }
    let init = GnnParams::init(cfg.layers, cfg.width, space.feature_dim(), rng)?;
    let targets = standardized_degrees(space);
    let data: Vec<_> = aggs.iter().zip(&targets).map(|(a, &y)| (a, y)).collect();
    let trained = adam_train(&init, &data, &cfg.trainer, rng)?;
    let mut k = representation_kernel(aggs, &trained)?.entries;
    k.add_diag(cfg.jitter);
    let factor = chol(&k)?;
    let mu = mvn_sample(&vec![0.0; aggs.len()], &factor, rng)?;
    RewardTable::new(mu, GeneratorTag::GpRep)
}

/// `mu[index] + eps`, `eps ~ N(0, noise_std^2)`.
pub fn pull<R: Rng + ?Sized>(table: &RewardTable, index: usize, noise_std: f64, rng: &mut R) -> Result<f64, EnvError> {
    let mu = *table.mu.get(index).ok_or(EnvError::IndexOutOfRange { index, count: table.len() })?;
    Ok(if noise_std == 0.0 { mu } else { mu + noise_std * f64::standard_normal(rng) })
}

// ── Environment ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum RewardSpec {
    Linear,
    GpGntk { layers: usize, width: usize, obs_var: f64 },
    GpRep(PretrainConfig),
}

impl RewardSpec {
    pub fn tag(&self) -> GeneratorTag {
        match self {
            RewardSpec::Linear => GeneratorTag::Linear,
            RewardSpec::GpGntk { .. } => GeneratorTag::GpGntk,
            RewardSpec::GpRep(_) => GeneratorTag::GpRep,
        }
    }
}

/// Reasons a zero-output network of this shape cannot be initialized.
fn network_problems(layers: usize, width: usize, input_dim: usize) -> Option<GnnError> {
    match crate::gnn::Architecture::new(layers, width, input_dim.max(1)) {
        Err(e) => Some(e),
        Ok(_) if width % 2 != 0 => Some(GnnError::OddWidth(width)),
        Ok(_) => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub graph: GraphKind,
    pub nodes: usize,
    pub actions: usize,
    pub feature_dim: usize,
    pub reward: RewardSpec,
    pub noise_std: f64,
    pub horizon: usize,
}

impl EnvConfig {
    /// Every violated constraint, empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let GraphKind::Er { p } = self.graph {
            if !(0.0..=1.0).contains(&p) {
                out.push(format!("edge probability must lie in [0, 1], got {p}"));
            }
        }
        if self.nodes == 0 {
            out.push("node count must be >= 1".into());
        }
        if self.actions == 0 {
            out.push("action count must be >= 1".into());
        }
        if self.feature_dim == 0 {
            out.push("feature dimension must be >= 1".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            out.push(format!("noise standard deviation must be >= 0, got {}", self.noise_std));
        }
        if self.horizon == 0 {
            out.push("horizon must be >= 1".into());
        }
        match self.reward {
            RewardSpec::Linear => {}
            RewardSpec::GpGntk { layers, width, obs_var } => {
                out.extend(network_problems(layers, width, self.feature_dim).map(|e| format!("gp_gntk network: {e}")));
                if !(obs_var > 0.0) {
                    out.push(format!("gp_gntk observation variance must be > 0, got {obs_var}"));
                }
            }
            RewardSpec::GpRep(cfg) => {
                out.extend(
                    network_problems(cfg.layers, cfg.width, self.feature_dim).map(|e| format!("gp_rep network: {e}")),
                );
                if let Err(e) = cfg.trainer.validate() {
                    out.push(format!("gp_rep pretraining: {e}"));
                }
                if !(cfg.jitter >= 0.0) {
                    out.push(format!("gp_rep jitter must be >= 0, got {}", cfg.jitter));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(EnvError::InvalidConfig(p.join("; ")))
        }
    }
}

/// One repetition's world: the action space, both aggregations of it, and
/// the reward table. Shared by every algorithm of that repetition.
#[derive(Debug, Clone)]
pub struct Environment {
    pub config: EnvConfig,
    pub space: ActionSpace<f64>,
    pub graph_features: Vec<AggregatedFeatures<f64>>,
    pub node_features: Vec<AggregatedFeatures<f64>>,
    pub table: RewardTable,
}

impl Environment {
    /// Draws the action space and reward table from the environment branch of
    /// `(master, rep)`.
    pub fn build(config: EnvConfig, master: u64, rep: u64) -> Result<Self, EnvError> {
        config.validate()?;
        let mut graph_rng = rng::derive(master, &[rep, tag::ENVIRONMENT, tag::GRAPHS]);
        let space = gen_action_space(config.graph, config.actions, config.nodes, config.feature_dim, &mut graph_rng)?;
        let mut reward_rng = rng::derive(master, &[rep, tag::ENVIRONMENT, tag::REWARD]);
        Self::from_space(config, space, &mut reward_rng)
    }

    pub fn from_space<R: Rng + ?Sized>(
        config: EnvConfig,
        space: ActionSpace<f64>,
        rng: &mut R,
    ) -> Result<Self, EnvError> {
        let graph_features = space.aggregate_all(Aggregation::default());
        let node_features = space.aggregate_all(Aggregation { identity_mode: true, normalize: true });
        let table = match config.reward {
            RewardSpec::Linear => linear_reward(&graph_features, rng)?,
            RewardSpec::GpGntk { layers, width, obs_var } => {
                let params0 = GnnParams::init(layers, width, space.feature_dim(), rng)?;
                gp_gntk_reward(&graph_features, &params0, obs_var, rng)?
            }
            RewardSpec::GpRep(cfg) => rep_kernel_reward(&space, &graph_features, &cfg, rng)?,
        };
        Ok(Self { config, space, graph_features, node_features, table })
    }

    pub fn features(&self, identity_mode: bool) -> &[AggregatedFeatures<f64>] {
        if identity_mode {
            &self.node_features
        } else {
            &self.graph_features
        }
    }
}

// ── Algorithms ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "GNN-TS")]
    GnnTs,
    #[serde(rename = "GNN-UCB")]
    GnnUcb,
    #[serde(rename = "GNN-PE")]
    GnnPe,
    #[serde(rename = "NN-TS")]
    NnTs,
    #[serde(rename = "NN-UCB")]
    NnUcb,
    #[serde(rename = "NN-PE")]
    NnPe,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    Thompson,
    Ucb,
    Elimination,
    Uniform,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::GnnTs,
        Algorithm::GnnUcb,
        Algorithm::GnnPe,
        Algorithm::NnTs,
        Algorithm::NnUcb,
        Algorithm::NnPe,
        Algorithm::Random,
    ];

    /// Stable identifier used to derive the algorithm's random stream.
    pub fn id(self) -> u64 {
        match self {
            Algorithm::GnnTs => 0,
            Algorithm::GnnUcb => 1,
            Algorithm::GnnPe => 2,
            Algorithm::NnTs => 3,
            Algorithm::NnUcb => 4,
            Algorithm::NnPe => 5,
            Algorithm::Random => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::GnnTs => "GNN-TS",
            Algorithm::GnnUcb => "GNN-UCB",
            Algorithm::GnnPe => "GNN-PE",
            Algorithm::NnTs => "NN-TS",
            Algorithm::NnUcb => "NN-UCB",
            Algorithm::NnPe => "NN-PE",
            Algorithm::Random => "Random",
        }
    }

    pub fn rule(self) -> Rule {
        match self {
            Algorithm::GnnTs | Algorithm::NnTs => Rule::Thompson,
            Algorithm::GnnUcb | Algorithm::NnUcb => Rule::Ucb,
            Algorithm::GnnPe | Algorithm::NnPe => Rule::Elimination,
            Algorithm::Random => Rule::Uniform,
        }
    }

    /// Feature-only baselines ignore the adjacency.
    pub fn identity_mode(self) -> bool {
        matches!(self, Algorithm::NnTs | Algorithm::NnUcb | Algorithm::NnPe)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL.into_iter().find(|a| a.name().eq_ignore_ascii_case(s)).ok_or_else(|| {
            let known: Vec<_> = Algorithm::ALL.iter().map(|a| a.name()).collect();
            format!("unknown algorithm {s:?} (known: {})", known.join(", "))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Thompson exploration scale.
    pub nu: f64,
    /// Confidence width for UCB and elimination.
    pub beta: f64,
    pub layers: usize,
    pub width: usize,
    /// Regularizer of both the training objective and `U_0 = lambda I`.
    pub lambda: f64,
    /// Its `l2_weight` is replaced by `lambda`.
    pub trainer: TrainerConfig,
    pub inverse_mode: InverseMode,
    /// Tangent features at the initialization instead of the current
    /// parameters.
    pub initial_gradients: bool,
    /// Train after every `train_every`-th round.
    pub train_every: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            nu: 1.0,
            beta: 1.0,
            layers: 2,
            width: 512,
            lambda: 1e-3,
            trainer: TrainerConfig::default(),
            inverse_mode: InverseMode::Diagonal,
            initial_gradients: false,
            train_every: 1,
        }
    }
}

impl Hyperparams {
    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig { l2_weight: self.lambda, ..self.trainer }
    }

    pub fn problems(&self, feature_dim: usize) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            out.push(format!("nu must be >= 0, got {}", self.nu));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            out.push(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            out.push(format!("lambda must be > 0, got {}", self.lambda));
        }
        if self.train_every == 0 {
            out.push("train_every must be >= 1".into());
        }
        out.extend(network_problems(self.layers, self.width, feature_dim).map(|e| e.to_string()));
        if let Err(e) = self.trainer_config().validate() {
            out.push(e.to_string());
        }
        out
    }
}

// ── Runs ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: usize,
    pub choice: usize,
    pub reward: f64,
    pub inst_regret: f64,
    pub cum_regret: f64,
}

/// Both sides of the elliptical-potential inequality for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialReport {
    /// `sum_t min(1, sigma_t^2(G_t))`.
    pub lhs: f64,
    /// `2 (ln det U_T - ln det U_0)` accumulated by the determinant lemma.
    pub rhs: f64,
    pub lambda: f64,
    /// Tangent features of the chosen actions, in round order.
    pub chosen_features: Vec<Vec<f64>>,
}

impl PotentialReport {
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub algorithm: Algorithm,
    pub rep: u64,
    pub seed: u64,
    pub fingerprint: String,
    pub records: Vec<RoundRecord>,
    pub potential: Option<PotentialReport>,
    pub final_params: Option<GnnParams<f64>>,
}

impl RunResult {
    pub fn final_regret(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.cum_regret)
    }
}

/// Per-run options beyond the hyperparameters.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Record the elliptical potential (full inverse mode only).
    pub record_potential: bool,
    /// Keep the final network parameters in the result.
    pub keep_params: bool,
}

struct Learner<'a> {
    initial: GnnParams<f64>,
    current: GnnParams<f64>,
    state: UncertaintyState<f64>,
    history: HistoryBuffer<'a, f64>,
    active: ActiveSet,
}

fn evaluate(
    learner: &Learner<'_>,
    aggs: &[AggregatedFeatures<f64>],
    initial_gradients: bool,
) -> Result<Vec<(f64, TangentFeature<f64>)>, GnnError> {
    aggs.par_iter()
        .map(|a| {
            let (f, tf) = value_and_tangent(&learner.current, a, ThetaTag::Current)?;
            if initial_gradients {
                let (_, tf0) = value_and_tangent(&learner.initial, a, ThetaTag::Initial)?;
                Ok((f, tf0))
            } else {
                Ok((f, tf))
            }
        })
        .collect()
}

/// Runs one algorithm on one environment for `env.config.horizon` rounds.
///
/// The policy, initialization, training and noise streams all branch from
/// `(master, rep, algorithm id)`, so a run does not depend on which other
/// runs share the experiment.
pub fn run_bandit(
    algorithm: Algorithm,
    env: &Environment,
    hp: &Hyperparams,
    master: u64,
    rep: u64,
    opts: RunOptions,
) -> Result<RunResult, EnvError> {
    let problems = hp.problems(env.space.feature_dim());
    if !problems.is_empty() {
        return Err(EnvError::InvalidConfig(problems.join("; ")));
    }
    if opts.record_potential && hp.inverse_mode != InverseMode::Full {
        return Err(EnvError::InvalidConfig("the potential diagnostic needs the full inverse mode".into()));
    }
    let base = [rep, tag::POLICY, algorithm.id()];
    let branch = |t: u64| -> Stream { rng::derive(master, &[base[0], base[1], base[2], t]) };
    let mut policy_rng = branch(tag::POLICY);
    let mut noise_rng = branch(tag::NOISE);
    let mut train_rng = branch(tag::TRAIN);

    let count = env.space.len();
    let aggs = env.features(algorithm.identity_mode());
    let trainer = hp.trainer_config();

    let mut learner = if algorithm.rule() == Rule::Uniform {
        None
    } else {
        let initial = GnnParams::init(hp.layers, hp.width, env.space.feature_dim(), &mut branch(tag::INIT))?;
        let state = UncertaintyState::new(hp.inverse_mode, initial.total_dim(), hp.lambda, hp.width)?;
        Some(Learner {
            current: initial.clone(),
            initial,
            state,
            history: HistoryBuffer::new(),
            active: ActiveSet::full(count),
        })
    };

    let mut potential = opts.record_potential.then(|| PotentialReport {
        lhs: 0.0,
        rhs: 0.0,
        lambda: hp.lambda,
        chosen_features: Vec::new(),
    });
    let mut records = Vec::with_capacity(env.config.horizon);
    let mut cum = 0.0;

    let mut round = |t: usize| -> Result<RoundRecord, EnvError> {
        let choice = match learner.as_mut() {
            None => random_select(count, &mut policy_rng)?,
            Some(l) => {
                let evals = evaluate(l, aggs, hp.initial_gradients)?;
                let means: Vec<f64> = evals.iter().map(|(f, _)| *f).collect();
                let sigmas = evals.iter().map(|(_, tf)| l.state.sigma(tf)).collect::<Result<Vec<_>, _>>()?;
                let pick = match algorithm.rule() {
                    Rule::Thompson => ts_select(&means, &sigmas, hp.nu, &mut policy_rng)?.0,
                    Rule::Ucb => ucb_select(&means, &sigmas, hp.beta)?,
                    Rule::Elimination => {
                        let (i, next) = pe_step(&means, &sigmas, hp.beta, &l.active)?;
                        l.active = next;
                        i
                    }
                    Rule::Uniform => unreachable!("uniform runs have no learner"),
                };
                let tf = &evals[pick].1;
                if let Some(report) = potential.as_mut() {
                    report.lhs += (sigmas[pick] * sigmas[pick]).min(1.0);
                    report.chosen_features.push(tf.vec.clone());
                }
                l.state.update(tf)?;
                pick
            }
        };

        let reward = pull(&env.table, choice, env.config.noise_std, &mut noise_rng)?;
        if let Some(l) = learner.as_mut() {
            l.history.push(&aggs[choice], reward)?;
            if t % hp.train_every == 0 {
                l.current = train(&l.current, &l.initial, &l.history, &trainer, &mut train_rng)?;
            }
        }
        let inst = env.table.gap(choice)?;
        cum += inst;
        Ok(RoundRecord { t, choice, reward, inst_regret: inst, cum_regret: cum })
    };
    for t in 1..=env.config.horizon {
        let record = round(t).map_err(|e| EnvError::Round { t, source: Box::new(e) })?;
        records.push(record);
    }

    if let (Some(report), Some(l)) = (potential.as_mut(), learner.as_ref()) {
        report.rhs = 2.0 * l.state.log_det_growth();
    }
    Ok(RunResult {
        algorithm,
        rep,
        seed: master,
        fingerprint: fingerprint(&env.config, hp),
        records,
        potential,
        final_params: if opts.keep_params { learner.map(|l| l.current) } else { None },
    })
}

/// 64-bit FNV-1a of the serialized configuration, as hex.
pub fn fingerprint(env: &EnvConfig, hp: &Hyperparams) -> String {
    let text = serde_json::to_string(&(env, hp)).unwrap_or_default();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// `ln det(lambda I + sum_s phi_s phi_s^T) - p ln lambda` from an explicitly
/// assembled design matrix.
pub fn dense_log_det_growth(features: &[Vec<f64>], lambda: f64) -> Result<f64, EnvError> {
    let p = features.first().map_or(0, Vec::len);
    let mut u = Matrix::identity(p);
    u.scale(lambda);
    for phi in features {
        if phi.len() != p {
            return Err(EnvError::InvalidConfig("feature lengths differ".into()));
        }
        u.add_outer(1.0, phi);
    }
    Ok(crate::linalg::spd_log_det(&u)? - p as f64 * lambda.ln())
}
