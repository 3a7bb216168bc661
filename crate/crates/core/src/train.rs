//! Minibatch optimizers for the ridge objective and for plain-MSE pretraining.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::gnn::{GnnError, GnnParams, HistoryBuffer, NodeCache};
use crate::graph::AggregatedFeatures;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Normalizer of the squared-error term in each minibatch step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossScaling {
    /// `1/(2t)` with `t` the full history length, as in the batch objective.
    #[default]
    History,
    /// `1/(2B)` with `B` the minibatch size (unbiased for the batch objective).
    Batch,
}

/// Point the ridge penalty pulls towards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyCenter {
    /// `|theta|^2`.
    #[default]
    Origin,
    /// `|theta - theta0|^2`.
    Initial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    /// `lambda` in the `(m lambda / 2) |theta|^2` penalty.
    pub l2_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    /// Continue from the supplied parameters instead of restarting from the
    /// initialization.
    pub warm_start: bool,
    pub loss_scaling: LossScaling,
    pub penalty_center: PenaltyCenter,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            l2_weight: 1e-3,
            epochs: 30,
            batch_size: 5,
            optimizer: Optimizer::Sgd,
            warm_start: true,
            loss_scaling: LossScaling::History,
            penalty_center: PenaltyCenter::Origin,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), GnnError> {
        let mut problems = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.l2_weight > 0.0 && self.l2_weight.is_finite()) {
            problems.push(format!("l2_weight must be > 0, got {}", self.l2_weight));
        }
        if self.epochs == 0 {
            problems.push("epochs must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".to_string());
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                problems.push("adam requires 0 <= beta1, beta2 < 1 and eps > 0".to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(GnnError::InvalidConfig(problems.join("; ")))
        }
    }
}

struct AdamState<F> {
    m: Vec<F>,
    v: Vec<F>,
    step: i32,
    beta1: F,
    beta2: F,
    eps: F,
}

impl<F: Scalar> AdamState<F> {
    fn new(p: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![F::zero(); p],
            v: vec![F::zero(); p],
            step: 0,
            beta1: F::of(beta1),
            beta2: F::of(beta2),
            eps: F::of(eps),
        }
    }

    fn apply(&mut self, theta: &mut [F], grad: &[F], lr: F) {
        self.step += 1;
        let one = F::one();
        let c1 = one - self.beta1.powi(self.step);
        let c2 = one - self.beta2.powi(self.step);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            theta[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

enum Stepper<F> {
    Sgd,
    Adam(AdamState<F>),
}

impl<F: Scalar> Stepper<F> {
    fn new(opt: Optimizer, p: usize) -> Self {
        match opt {
            Optimizer::Sgd => Stepper::Sgd,
            Optimizer::Adam { beta1, beta2, eps } => Stepper::Adam(AdamState::new(p, beta1, beta2, eps)),
        }
    }

    fn apply(&mut self, theta: &mut [F], grad: &[F], lr: F) {
        match self {
            Stepper::Sgd => {
                for (t, &g) in theta.iter_mut().zip(grad) {
                    *t -= lr * g;
                }
            }
            Stepper::Adam(state) => state.apply(theta, grad, lr),
        }
    }
}

/// Shared epoch loop; `l2` adds `l2 * (theta - center)` to every step's
/// gradient (`center` defaults to the origin).
fn run_epochs<F: Scalar, R: Rng + ?Sized>(
    params: &mut GnnParams<F>,
    data: &[(&AggregatedFeatures<F>, F)],
    cfg: &TrainerConfig,
    l2: F,
    center: Option<&[F]>,
    mse: bool,
    rng: &mut R,
) {
    let p = params.total_dim();
    let lr = F::of(cfg.learning_rate);
    let mut stepper = Stepper::new(cfg.optimizer, p);
    let mut cache = NodeCache::default();
    let mut grad = vec![F::zero(); p];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut groups: Vec<(&AggregatedFeatures<F>, Vec<usize>)> = Vec::new();

    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = F::zero());
            let b = match cfg.loss_scaling {
                LossScaling::History => F::of_usize(data.len()),
                LossScaling::Batch => F::of_usize(batch.len()),
            };
            // (1/2n) sum r^2 for the ridge objective, (1/n) sum r^2 for MSE.
            let coef = if mse { F::of(2.0) / b } else { F::one() / b };
            // Entries sharing a graph share one forward/backward pass.
            groups.clear();
            for &idx in batch {
                let agg = data[idx].0;
                match groups.iter_mut().find(|(g, _)| std::ptr::eq(*g, agg)) {
                    Some((_, members)) => members.push(idx),
                    None => groups.push((agg, vec![idx])),
                }
            }
            for (agg, members) in &groups {
                let f = params.forward_cached(agg, &mut cache);
                let r: F = members.iter().map(|&i| f - data[i].1).sum();
                if r != F::zero() {
                    params.backward_cached(agg, &mut cache, coef * r, &mut grad);
                }
            }
            if l2 != F::zero() {
                match center {
                    None => {
                        for (g, &t) in grad.iter_mut().zip(params.as_slice()) {
                            *g += l2 * t;
                        }
                    }
                    Some(c) => {
                        for ((g, &t), &t0) in grad.iter_mut().zip(params.as_slice()).zip(c) {
                            *g += l2 * (t - t0);
                        }
                    }
                }
            }
            stepper.apply(params.as_mut_slice(), &grad, lr);
        }
    }
}

/// Minibatch descent on the ridge objective over the whole history.
///
/// Each step follows the gradient of
/// `(1/2n) sum_{i in batch} (f(G_i) - y_i)^2 + (m lambda / 2) |theta|^2`
/// where `n` is the history length or the batch size per `loss_scaling`.
/// With `warm_start` the run continues from `current`; otherwise it restarts
/// from `initial`.
pub fn train<F: Scalar, R: Rng + ?Sized>(
    current: &GnnParams<F>,
    initial: &GnnParams<F>,
    history: &HistoryBuffer<'_, F>,
    cfg: &TrainerConfig,
    rng: &mut R,
) -> Result<GnnParams<F>, GnnError> {
    cfg.validate()?;
    if history.is_empty() {
        return Err(GnnError::EmptyHistory);
    }
    let mut params = if cfg.warm_start { current.clone() } else { initial.clone() };
    for (agg, _) in history.entries() {
        if agg.dim() != params.input_dim() {
            return Err(GnnError::DimensionMismatch {
                what: "input features",
                expected: params.input_dim(),
                actual: agg.dim(),
            });
        }
    }
    let l2 = F::of_usize(params.width()) * F::of(cfg.l2_weight);
    let center = match cfg.penalty_center {
        PenaltyCenter::Origin => None,
        PenaltyCenter::Initial => Some(initial.as_slice()),
    };
    run_epochs(&mut params, history.entries(), cfg, l2, center, false, rng);
    Ok(params)
}

/// Unregularized mean-squared-error training (used to pretrain the network
/// that defines the representation kernel) with Adam moment updates. An SGD
/// optimizer in `cfg` is replaced by default Adam. Each step averages over
/// its own minibatch; `l2_weight`, `warm_start` and `loss_scaling` are
/// ignored.
pub fn adam_train<F: Scalar, R: Rng + ?Sized>(
    params: &GnnParams<F>,
    dataset: &[(&AggregatedFeatures<F>, F)],
    cfg: &TrainerConfig,
    rng: &mut R,
) -> Result<GnnParams<F>, GnnError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(GnnError::EmptyHistory);
    }
    let mut cfg = *cfg;
    cfg.loss_scaling = LossScaling::Batch;
    if cfg.optimizer == Optimizer::Sgd {
        cfg.optimizer = Optimizer::adam();
    }
    let mut out = params.clone();
    run_epochs(&mut out, dataset, &cfg, F::zero(), None, true, rng);
    Ok(out)
}

/// Mean squared error of `params` on `dataset`.
pub fn mse<F: Scalar>(params: &GnnParams<F>, dataset: &[(&AggregatedFeatures<F>, F)]) -> Result<F, GnnError> {
    if dataset.is_empty() {
        return Err(GnnError::EmptyHistory);
    }
    let mut s = F::zero();
    for (agg, y) in dataset {
        let r = params.forward_gnn(agg)? - *y;
        s += r * r;
    }
    Ok(s / F::of_usize(dataset.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::loss;
    use crate::graph::{gen_er, Graph};
    use crate::rng;

    fn setup(count: usize, seed: u64) -> (GnnParams<f64>, Vec<AggregatedFeatures<f64>>, Vec<f64>) {
        let mut r = rng::derive(seed, &[]);
        let p = GnnParams::init(2, 16, 4, &mut r).unwrap();
        let graphs: Vec<Graph<f64>> = (0..count).map(|_| gen_er(6, 0.5, 4, &mut r).unwrap()).collect();
        let aggs = graphs.iter().map(|g| g.aggregate(false)).collect();
        let ys = graphs.iter().map(|g| g.average_degree() - 2.5).collect();
        (p, aggs, ys)
    }

    fn history<'a>(aggs: &'a [AggregatedFeatures<f64>], ys: &[f64]) -> HistoryBuffer<'a, f64> {
        let mut h = HistoryBuffer::new();
        for (a, &y) in aggs.iter().zip(ys) {
            h.push(a, y).unwrap();
        }
        h
    }

    #[test]
    fn small_full_batch_step_decreases_loss() {
        let (p, aggs, ys) = setup(8, 1);
        let h = history(&aggs, &ys);
        let cfg = TrainerConfig {
            learning_rate: 1e-4,
            l2_weight: 1e-3,
            epochs: 1,
            batch_size: 8,
            ..TrainerConfig::default()
        };
        let before = loss(&p, &h, 1e-3).unwrap();
        let q = train(&p, &p, &h, &cfg, &mut rng::derive(2, &[])).unwrap();
        let after = loss(&q, &h, 1e-3).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn heavy_regularization_shrinks_weights() {
        let (p, aggs, ys) = setup(5, 3);
        let h = history(&aggs, &ys);
        let cfg = TrainerConfig { learning_rate: 1e-8, l2_weight: 1e6, epochs: 3, ..TrainerConfig::default() };
        let q = train(&p, &p, &h, &cfg, &mut rng::derive(2, &[])).unwrap();
        assert!(q.norm_sq() < p.norm_sq());
    }

    #[test]
    fn invalid_configs_rejected() {
        let (p, aggs, ys) = setup(2, 4);
        let h = history(&aggs, &ys);
        for bad in [
            TrainerConfig { epochs: 0, ..TrainerConfig::default() },
            TrainerConfig { batch_size: 0, ..TrainerConfig::default() },
            TrainerConfig { learning_rate: 0.0, ..TrainerConfig::default() },
            TrainerConfig { l2_weight: -1.0, ..TrainerConfig::default() },
        ] {
            assert!(matches!(train(&p, &p, &h, &bad, &mut rng::derive(0, &[])), Err(GnnError::InvalidConfig(_))));
        }
        assert!(matches!(
            train(&p, &p, &HistoryBuffer::new(), &TrainerConfig::default(), &mut rng::derive(0, &[])),
            Err(GnnError::EmptyHistory)
        ));
    }

    #[test]
    fn cold_restart_is_bitwise_reproducible() {
        let (p, aggs, ys) = setup(7, 5);
        let h = history(&aggs, &ys);
        let cfg = TrainerConfig { warm_start: false, ..TrainerConfig::default() };
        let mut drifted = p.clone();
        drifted.as_mut_slice()[0] += 1.0;
        let a = train(&drifted, &p, &h, &cfg, &mut rng::derive(9, &[])).unwrap();
        let b = train(&p, &p, &h, &cfg, &mut rng::derive(9, &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adam_zero_residual_leaves_params_unchanged() {
        let (p, aggs, _) = setup(4, 6);
        let data: Vec<_> = aggs.iter().map(|a| (a, 0.0)).collect();
        let cfg = TrainerConfig { optimizer: Optimizer::adam(), batch_size: 2, ..TrainerConfig::default() };
        let q = adam_train(&p, &data, &cfg, &mut rng::derive(1, &[])).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let (p, aggs, ys) = setup(1, 7);
        let data = vec![(&aggs[0], ys[0])];
        let (eta, eps) = (0.01, 1e-8);
        let cfg = TrainerConfig {
            learning_rate: eta,
            epochs: 1,
            batch_size: 1,
            optimizer: Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps },
            ..TrainerConfig::default()
        };
        let q = adam_train(&p, &data, &cfg, &mut rng::derive(1, &[])).unwrap();
        let (f, grad) = p.value_and_grad(&aggs[0]).unwrap();
        let r = f - ys[0];
        for i in 0..p.total_dim() {
            let g = 2.0 * r * grad[i];
            let expected = p.as_slice()[i] - eta * g / ((g * g).sqrt() + eps);
            assert!((q.as_slice()[i] - expected).abs() < 1e-12, "coordinate {i}");
        }
    }

    #[test]
    fn adam_reduces_training_mse() {
        let (p, aggs, ys) = setup(10, 8);
        let data: Vec<_> = aggs.iter().zip(&ys).map(|(a, &y)| (a, y)).collect();
        let cfg = TrainerConfig {
            learning_rate: 0.01,
            epochs: 30,
            batch_size: 2,
            optimizer: Optimizer::adam(),
            ..TrainerConfig::default()
        };
        let before = mse(&p, &data).unwrap();
        let q = adam_train(&p, &data, &cfg, &mut rng::derive(3, &[])).unwrap();
        let after = mse(&q, &data).unwrap();
        assert!(after < 0.75 * before, "mse {before} -> {after}");
    }
}
