//! Tangent features `g(G; theta) / sqrt(m)`, the empirical graph neural
//! tangent kernel, effective dimension, the representation kernel, and the
//! Gaussian sampling utilities used to draw synthetic reward functions.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gnn::{GnnError, GnnParams};
use crate::graph::AggregatedFeatures;
use crate::linalg::{chol, symmetric_eigen, CholFactor, LinalgError, Matrix};
use crate::scalar::{dot, Scalar};

#[derive(Debug, Error)]
pub enum KernelError {
    #[error(transparent)]
    Gnn(#[from] GnnError),

    #[error(transparent)]
    Linalg(#[from] LinalgError),

    #[error("kernel is not positive semidefinite: min eigenvalue {min} vs max {max}")]
    NonPsd { min: f64, max: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThetaTag {
    Initial,
    Current,
}

/// Scaled gradient `g(G; theta) / sqrt(m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentFeature<F> {
    pub vec: Vec<F>,
    pub width: usize,
    pub tag: ThetaTag,
}

impl<F: Scalar> TangentFeature<F> {
    pub fn dim(&self) -> usize {
        self.vec.len()
    }

    pub fn zeros(dim: usize, width: usize, tag: ThetaTag) -> Self {
        Self { vec: vec![F::zero(); dim], width, tag }
    }
}

pub fn tangent_feature<F: Scalar>(
    params: &GnnParams<F>,
    agg: &AggregatedFeatures<F>,
    tag: ThetaTag,
) -> Result<TangentFeature<F>, GnnError> {
    Ok(value_and_tangent(params, agg, tag)?.1)
}

/// Network output together with its tangent feature, from one pass.
pub fn value_and_tangent<F: Scalar>(
    params: &GnnParams<F>,
    agg: &AggregatedFeatures<F>,
    tag: ThetaTag,
) -> Result<(F, TangentFeature<F>), GnnError> {
    let (value, mut grad) = params.value_and_grad(agg)?;
    let s = F::one() / F::of_usize(params.width()).sqrt();
    grad.iter_mut().for_each(|g| *g *= s);
    Ok((value, TangentFeature { vec: grad, width: params.width(), tag }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    EmpiricalGntk,
    Representation,
}

/// Symmetric `|G| x |G|` kernel matrix over an action space.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix<F> {
    pub entries: Matrix<F>,
    pub kind: KernelKind,
}

impl<F: Scalar> KernelMatrix<F> {
    pub fn len(&self) -> usize {
        self.entries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.rows() == 0
    }

    /// Ascending eigenvalues.
    pub fn spectrum(&self) -> Result<Vec<F>, LinalgError> {
        Ok(symmetric_eigen(&self.entries)?.values)
    }

    /// `min eig >= -tol * max eig`.
    pub fn is_psd(&self, tol: F) -> Result<bool, LinalgError> {
        let ev = self.spectrum()?;
        let (min, max) = (ev[0], ev[ev.len() - 1]);
        Ok(min >= -tol * max.max(F::zero()))
    }

    /// Row-major CSV with a header row of graph indices.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.len();
        let header: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        writeln!(w, "{}", header.join(","))?;
        for i in 0..n {
            let row: Vec<String> = self.entries.row(i).iter().map(|x| x.to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// `<g_i, g_j> / m` with tangent features at the initialization; computed
/// entrywise over the full square without symmetrizing.
pub fn empirical_gntk_raw<F: Scalar>(
    aggs: &[AggregatedFeatures<F>],
    params0: &GnnParams<F>,
) -> Result<Matrix<F>, GnnError> {
    let feats =
        aggs.par_iter().map(|a| tangent_feature(params0, a, ThetaTag::Initial)).collect::<Result<Vec<_>, _>>()?;
    Ok(gram(&feats.iter().map(|f| f.vec.as_slice()).collect::<Vec<_>>()))
}

fn gram<F: Scalar>(vecs: &[&[F]]) -> Matrix<F> {
    let n = vecs.len();
    let rows: Vec<Vec<F>> = (0..n).into_par_iter().map(|i| (0..n).map(|j| dot(vecs[i], vecs[j])).collect()).collect();
    Matrix::from_rows(&rows).unwrap_or_else(|_| Matrix::zeros(0, 0))
}

/// Empirical GNTK `K[i][j] = <g(G_i; theta0), g(G_j; theta0)> / m`, averaged
/// with its transpose.
pub fn empirical_gntk<F: Scalar>(
    aggs: &[AggregatedFeatures<F>],
    params0: &GnnParams<F>,
) -> Result<KernelMatrix<F>, GnnError> {
    let mut entries = empirical_gntk_raw(aggs, params0)?;
    entries.symmetrize();
    Ok(KernelMatrix { entries, kind: KernelKind::EmpiricalGntk })
}

/// Relative tolerance on negative eigenvalues when treating a kernel as PSD.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// `log det(I + T K / lambda) / log(1 + T rho_max / lambda)` from the
/// eigenvalues of `K` clipped at zero. Eigenvalues below `n * eps * rho_max`
/// are rounding noise of the eigensolver and count as zero. The zero kernel
/// has dimension 0.
pub fn effective_dimension<F: Scalar>(k: &Matrix<F>, horizon: usize, lambda: F) -> Result<F, KernelError> {
    if horizon == 0 {
        return Err(KernelError::InvalidArgument("horizon must be >= 1".into()));
    }
    if !(lambda > F::zero()) {
        return Err(KernelError::InvalidArgument("lambda must be > 0".into()));
    }
    if k.rows() == 0 {
        return Err(KernelError::InvalidArgument("kernel matrix is empty".into()));
    }
    let ev = symmetric_eigen(k)?.values;
    let (min, max) = (ev[0], ev[ev.len() - 1]);
    if min < -F::of(PSD_TOLERANCE) * max.max(F::zero()) {
        return Err(KernelError::NonPsd { min: min.as_f64(), max: max.as_f64() });
    }
    if max <= F::zero() {
        return Ok(F::zero());
    }
    let floor = F::of_usize(ev.len()) * F::epsilon() * max;
    let scale = F::of_usize(horizon) / lambda;
    let denom = (scale * max).ln_1p();
    // Per-eigenvalue ratios keep exactly-equal spectra exact.
    Ok(ev.iter().filter(|&&e| e > floor).map(|&e| (scale * e).ln_1p() / denom).sum())
}

/// `mean + L z`, `z` standard normal.
pub fn mvn_sample<F: Scalar, R: Rng + ?Sized>(
    mean: &[F],
    factor: &CholFactor<F>,
    rng: &mut R,
) -> Result<Vec<F>, LinalgError> {
    let n = factor.dim();
    if mean.len() != n {
        return Err(LinalgError::DimensionMismatch { expected: n, actual: mean.len() });
    }
    let z: Vec<F> = (0..n).map(|_| F::standard_normal(rng)).collect();
    let lz = factor.lower.matvec(&z)?;
    Ok(mean.iter().zip(lz).map(|(&m, v)| m + v).collect())
}

/// GP regression posterior over the same points the kernel is defined on:
/// `mean = K (K + s I)^-1 y`, `cov = K - K (K + s I)^-1 K` (symmetrized).
pub fn gp_posterior<F: Scalar>(k: &Matrix<F>, y: &[F], noise_var: F) -> Result<(Vec<F>, Matrix<F>), KernelError> {
    let n = k.rows();
    if y.len() != n {
        return Err(KernelError::Linalg(LinalgError::DimensionMismatch { expected: n, actual: y.len() }));
    }
    if !(noise_var > F::zero()) {
        return Err(KernelError::InvalidArgument("observation variance must be > 0".into()));
    }
    let mut a = k.clone();
    a.add_diag(noise_var);
    let factor = chol(&a)?;
    let alpha = factor.solve(y)?;
    let mean = k.matvec(&alpha)?;
    // X = A^-1 K column by column; K symmetric so column j of K is row j.
    let mut x = Matrix::zeros(n, n);
    for j in 0..n {
        let col = factor.solve(k.row(j))?;
        for i in 0..n {
            x[(i, j)] = col[i];
        }
    }
    let mut cov = k.sub(&k.matmul(&x)?)?;
    cov.symmetrize();
    Ok((mean, cov))
}

/// Node-averaged last-hidden-layer pre-activation (see [`GnnParams::representation`]).
pub fn representation<F: Scalar>(params: &GnnParams<F>, agg: &AggregatedFeatures<F>) -> Result<Vec<F>, GnnError> {
    params.representation(agg)
}

/// Gram matrix of graph representations.
pub fn representation_kernel<F: Scalar>(
    aggs: &[AggregatedFeatures<F>],
    params: &GnnParams<F>,
) -> Result<KernelMatrix<F>, GnnError> {
    let reps = aggs.par_iter().map(|a| params.representation(a)).collect::<Result<Vec<_>, _>>()?;
    let mut entries = gram(&reps.iter().map(Vec::as_slice).collect::<Vec<_>>());
    entries.symmetrize();
    Ok(KernelMatrix { entries, kind: KernelKind::Representation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{gen_action_space, GraphKind};
    use crate::linalg::spd_inverse;
    use crate::rng;
    use crate::scalar::norm_sq;

    fn space(count: usize, seed: u64) -> Vec<AggregatedFeatures<f64>> {
        let s = gen_action_space::<f64, _>(GraphKind::Er { p: 0.4 }, count, 8, 5, &mut rng::derive(seed, &[])).unwrap();
        s.graphs().iter().map(|g| g.aggregate(false)).collect()
    }

    #[test]
    fn zero_rows_give_zero_feature() {
        let p: GnnParams<f64> = GnnParams::init(2, 8, 3, &mut rng::derive(0, &[])).unwrap();
        let agg = AggregatedFeatures { rows: Matrix::zeros(4, 3), identity_mode: false };
        let tf = tangent_feature(&p, &agg, ThetaTag::Initial).unwrap();
        assert!(tf.vec.iter().all(|&x| x == 0.0));
        assert!(representation(&p, &agg).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn kernel_entries_are_tangent_inner_products() {
        let aggs = space(5, 1);
        let p: GnnParams<f64> = GnnParams::init(2, 16, 5, &mut rng::derive(2, &[])).unwrap();
        let k = empirical_gntk(&aggs, &p).unwrap();
        let tfs: Vec<_> = aggs.iter().map(|a| tangent_feature(&p, a, ThetaTag::Initial).unwrap()).collect();
        for i in 0..5 {
            assert!((k.entries[(i, i)] - norm_sq(&tfs[i].vec)).abs() < 1e-12);
            for j in 0..5 {
                assert!((k.entries[(i, j)] - dot(&tfs[i].vec, &tfs[j].vec)).abs() < 1e-12);
            }
        }
        let single = empirical_gntk(&aggs[..1], &p).unwrap();
        assert_eq!(single.len(), 1);
        assert!(single.entries[(0, 0)] >= 0.0);
    }

    #[test]
    fn duplicated_graphs_give_identical_rows() {
        let mut aggs = space(3, 4);
        aggs.push(aggs[0].clone());
        let p: GnnParams<f64> = GnnParams::init(2, 16, 5, &mut rng::derive(2, &[])).unwrap();
        let k = empirical_gntk(&aggs, &p).unwrap();
        assert_eq!(k.entries.row(0), k.entries.row(3));
        let ev = k.spectrum().unwrap();
        assert!(ev[0].abs() < 1e-10 * ev[3]);
    }

    #[test]
    fn effective_dimension_special_cases() {
        let k = Matrix::from_diag(&[2.5; 7]);
        assert_eq!(effective_dimension(&k, 100, 0.1).unwrap(), 7.0);
        let v = [1.0, -2.0, 0.5];
        let mut rank_one = Matrix::zeros(3, 3);
        rank_one.add_outer(1.0, &v);
        assert_eq!(effective_dimension(&rank_one, 50, 1.0).unwrap(), 1.0);
        let indefinite = Matrix::from_diag(&[1.0, -1.0]);
        assert!(matches!(effective_dimension(&indefinite, 5, 1.0), Err(KernelError::NonPsd { .. })));
        assert_eq!(effective_dimension(&Matrix::<f64>::zeros(2, 2), 5, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn gp_posterior_identity_closed_form() {
        let k = Matrix::<f64>::identity(3);
        let y = [1.0, -2.0, 4.0];
        let (mean, cov) = gp_posterior(&k, &y, 1.0).unwrap();
        for i in 0..3 {
            assert!((mean[i] - y[i] / 2.0).abs() < 1e-14);
            for j in 0..3 {
                let e = if i == j { 0.5 } else { 0.0 };
                assert!((cov[(i, j)] - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gp_posterior_limits() {
        let mut r = rng::derive(5, &[]);
        let b = Matrix::<f64>::random_normal(4, 4, &mut r);
        let mut k = b.matmul(&b.transpose()).unwrap();
        k.add_diag(1.0);
        let y = [0.3, -1.0, 2.0, 0.7];
        let ynorm = norm_sq::<f64>(&y).sqrt();
        let (mean, _) = gp_posterior(&k, &y, 1e8).unwrap();
        assert!(norm_sq(&mean).sqrt() < 1e-6 * ynorm * k.frobenius_norm());
        let (mean, _) = gp_posterior(&k, &y, 1e-8).unwrap();
        for i in 0..4 {
            assert!((mean[i] - y[i]).abs() < 1e-4);
        }
    }

    #[test]
    fn gp_posterior_matches_dense_inverse() {
        let mut r = rng::derive(6, &[]);
        let b = Matrix::<f64>::random_normal(3, 3, &mut r);
        let k = b.matmul(&b.transpose()).unwrap();
        let y = [1.0, 0.5, -0.25];
        let s = 0.3;
        let (mean, cov) = gp_posterior(&k, &y, s).unwrap();
        let mut a = k.clone();
        a.add_diag(s);
        let ainv = spd_inverse(&a).unwrap();
        let kai = k.matmul(&ainv).unwrap();
        let mean2 = kai.matvec(&y).unwrap();
        let cov2 = k.sub(&kai.matmul(&k).unwrap()).unwrap();
        for i in 0..3 {
            assert!((mean[i] - mean2[i]).abs() < 1e-10);
            for j in 0..3 {
                assert!((cov[(i, j)] - cov2[(i, j)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mvn_zero_factor_returns_mean_and_is_reproducible() {
        let f = CholFactor { lower: Matrix::<f64>::zeros(3, 3), jitter: 0.0 };
        let mean = [1.0, 2.0, 3.0];
        assert_eq!(mvn_sample(&mean, &f, &mut rng::derive(0, &[])).unwrap(), mean.to_vec());
        let id = chol(&Matrix::<f64>::identity(3)).unwrap();
        let a = mvn_sample(&mean, &id, &mut rng::derive(1, &[])).unwrap();
        let b = mvn_sample(&mean, &id, &mut rng::derive(1, &[])).unwrap();
        assert_eq!(a, b);
        assert!(mvn_sample(&mean[..2], &id, &mut rng::derive(1, &[])).is_err());
    }

    #[test]
    fn representation_kernel_is_gram_of_representations() {
        let aggs = space(6, 7);
        let p: GnnParams<f64> = GnnParams::init(3, 8, 5, &mut rng::derive(8, &[])).unwrap();
        let k = representation_kernel(&aggs, &p).unwrap();
        let reps: Vec<_> = aggs.iter().map(|a| representation(&p, a).unwrap()).collect();
        for i in 0..6 {
            assert!(k.entries[(i, i)] >= 0.0);
            for j in 0..6 {
                assert!((k.entries[(i, j)] - dot(&reps[i], &reps[j])).abs() < 1e-10);
            }
        }
        assert!(k.is_psd(PSD_TOLERANCE).unwrap());
        // at the zero-output initialization the penultimate layer is still informative
        assert!(k.entries.trace() > 0.0);
    }

    #[test]
    fn single_node_representation_is_its_penultimate_preactivation() {
        let p: GnnParams<f64> = GnnParams::init(3, 8, 2, &mut rng::derive(9, &[])).unwrap();
        let agg = AggregatedFeatures { rows: Matrix::from_rows(&[vec![0.6, 0.8]]).unwrap(), identity_mode: false };
        let trace = p.forward_mlp(&[0.6, 0.8]).unwrap();
        assert_eq!(representation(&p, &agg).unwrap(), trace.pre_activations[1]);
    }

    #[test]
    fn kernel_csv_layout() {
        let k = KernelMatrix {
            entries: Matrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 2.0]]).unwrap(),
            kind: KernelKind::EmpiricalGntk,
        };
        let mut buf = Vec::new();
        k.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "0,1\n1,0.5\n0.5,2\n");
    }
}
