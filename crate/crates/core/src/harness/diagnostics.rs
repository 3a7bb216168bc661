//! Numerical self-checks exposed as subcommands.

use rand::Rng;

use crate::env::{dense_log_det_growth, run_bandit, Algorithm, Environment, Hyperparams, PotentialReport, RunOptions};
use crate::gnn::GnnParams;
use crate::graph::{gen_er, AggregatedFeatures};
use crate::policy::InverseMode;
use crate::rng::{self, tag};
use crate::tangent::{effective_dimension, empirical_gntk_raw, KernelKind, KernelMatrix, PSD_TOLERANCE};

use super::HarnessError;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub layers: Vec<usize>,
    pub width: usize,
    /// Random `(parameters, graph)` pairs per depth.
    pub pairs: usize,
    pub step: f64,
    pub nodes: usize,
    pub edge_probability: f64,
    pub feature_dim: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { layers: vec![2, 3], width: 32, pairs: 10, step: 1e-4, nodes: 20, edge_probability: 0.4, feature_dim: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates whose step flipped a ReLU and were left out.
    pub skipped: usize,
}

/// Denominator floor of the relative error, below which differences are
/// effectively absolute.
pub const GRADCHECK_FLOOR: f64 = 1e-8;

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// Compares the analytic gradient with central differences, coordinate by
/// coordinate.
///
/// Parameters are a fresh initialization with every entry scaled by
/// `1 + 0.1 z`, which breaks the mirrored halves so the output is not
/// identically zero. A coordinate is skipped when moving it by the step
/// changes any hidden sign, since the difference quotient then straddles a
/// kink.
pub fn gradcheck(opts: &GradcheckOptions, seed: u64) -> Result<GradcheckReport, HarnessError> {
    let mut report = GradcheckReport { max_rel_error: 0.0, checked: 0, skipped: 0 };
    for &layers in &opts.layers {
        for pair in 0..opts.pairs {
            let mut rng = rng::derive(seed, &[layers as u64, pair as u64]);
            let mut params = GnnParams::<f64>::init(layers, opts.width, opts.feature_dim, &mut rng)?;
            for w in params.as_mut_slice() {
                *w *= 1.0 + 0.1 * <f64 as crate::Scalar>::standard_normal(&mut rng);
            }
            let graph = gen_er::<f64, _>(opts.nodes, opts.edge_probability, opts.feature_dim, &mut rng)?;
            let agg = graph.aggregate(false);
            check_pair(&params, &agg, opts.step, &mut report)?;
        }
    }
    Ok(report)
}

fn check_pair(
    params: &GnnParams<f64>,
    agg: &AggregatedFeatures<f64>,
    h: f64,
    report: &mut GradcheckReport,
) -> Result<(), HarnessError> {
    let (_, grad) = params.value_and_grad(agg)?;
    let base = params.activation_pattern(agg)?;
    let mut probe = params.clone();
    for (j, &g) in grad.iter().enumerate() {
        let w = params.as_slice()[j];
        probe.as_mut_slice()[j] = w + h;
        let plus = probe.forward_gnn(agg)?;
        let same_plus = probe.activation_pattern(agg)? == base;
        probe.as_mut_slice()[j] = w - h;
        let minus = probe.forward_gnn(agg)?;
        let same_minus = probe.activation_pattern(agg)? == base;
        probe.as_mut_slice()[j] = w;
        if !(same_plus && same_minus) {
            report.skipped += 1;
            continue;
        }
        let err = relative_error(g, (plus - minus) / (2.0 * h));
        report.checked += 1;
        report.max_rel_error = report.max_rel_error.max(err);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GntkReport {
    /// Largest `|K_ij - K_ji|` before symmetrization.
    pub asymmetry: f64,
    pub kernel: KernelMatrix<f64>,
    /// Ascending.
    pub spectrum: Vec<f64>,
}

impl GntkReport {
    pub fn min_eigenvalue(&self) -> f64 {
        self.spectrum.first().copied().unwrap_or(0.0)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.spectrum.last().copied().unwrap_or(0.0)
    }

    pub fn is_psd(&self) -> bool {
        self.min_eigenvalue() >= -PSD_TOLERANCE * self.max_eigenvalue().max(0.0)
    }
}

/// Empirical GNTK of an environment's action space at a fresh
/// initialization drawn from `seed`.
pub fn gntk_report(
    aggs: &[AggregatedFeatures<f64>],
    layers: usize,
    width: usize,
    seed: u64,
) -> Result<GntkReport, HarnessError> {
    let dim = aggs.first().map_or(1, |a| a.dim());
    let params0 = GnnParams::init(layers, width, dim, &mut rng::derive(seed, &[0, tag::INIT]))?;
    let raw = empirical_gntk_raw(aggs, &params0)?;
    let asymmetry = raw.max_asymmetry();
    let mut entries = raw;
    entries.symmetrize();
    let kernel = KernelMatrix { entries, kind: KernelKind::EmpiricalGntk };
    let spectrum = kernel.spectrum()?;
    Ok(GntkReport { asymmetry, kernel, spectrum })
}

pub fn effdim_of(report: &GntkReport, horizon: usize, lambda: f64) -> Result<f64, HarnessError> {
    Ok(effective_dimension(&report.kernel.entries, horizon, lambda)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialCheck {
    pub report: PotentialReport,
    /// The right-hand side recomputed from an explicitly assembled design
    /// matrix.
    pub dense_rhs: f64,
}

impl PotentialCheck {
    pub fn holds(&self) -> bool {
        self.report.holds() && self.report.lhs <= self.dense_rhs
    }
}

/// One full-inverse GNN-TS run on `env`, recording both sides of the
/// elliptical potential inequality.
pub fn potential_check(
    env: &Environment,
    hp: &Hyperparams,
    seed: u64,
    rep: u64,
) -> Result<PotentialCheck, HarnessError> {
    let hp = Hyperparams { inverse_mode: InverseMode::Full, ..*hp };
    let run =
        run_bandit(Algorithm::GnnTs, env, &hp, seed, rep, RunOptions { record_potential: true, keep_params: false })?;
    let report = run.potential.ok_or_else(|| HarnessError::Malformed("run did not record the potential".into()))?;
    let dense_rhs = 2.0 * dense_log_det_growth(&report.chosen_features, report.lambda)?;
    Ok(PotentialCheck { report, dense_rhs })
}

/// A random symmetric PSD matrix `A A^T` of rank at most `rank`.
pub fn random_psd<R: Rng + ?Sized>(n: usize, rank: usize, rng: &mut R) -> crate::Matrix {
    let a = crate::Matrix::random_normal(n, rank, rng);
    let mut k = a.matmul(&a.transpose()).expect("conforming shapes");
    k.symmetrize();
    k
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_gradcheck_passes() {
        let opts = GradcheckOptions { pairs: 2, width: 8, ..GradcheckOptions::default() };
        let r = gradcheck(&opts, 3).unwrap();
        assert!(r.checked > 0);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!(relative_error(1e-13, 0.0) < 1e-4);
    }
}
