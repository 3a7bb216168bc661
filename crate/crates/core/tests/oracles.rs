//! Cross-checks against independent dense linear algebra (nalgebra) and
//! against hand-assembled reference computations.

use nalgebra::{DMatrix, DVector};

use graphbandit::env::{dense_log_det_growth, linear_reward_with};
use graphbandit::gnn::GnnParams;
use graphbandit::graph::{gen_action_space, gen_er, AggregatedFeatures, Aggregation, GraphKind};
use graphbandit::linalg::{chol, spd_inverse, symmetric_eigen, Matrix};
use graphbandit::policy::{InverseMode, UncertaintyState};
use graphbandit::rng;
use graphbandit::tangent::{effective_dimension, empirical_gntk, gp_posterior, TangentFeature, ThetaTag};
use graphbandit::Scalar;

fn to_na(m: &Matrix<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn random_features(count: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::derive(seed, &[]);
    (0..count).map(|_| (0..dim).map(|_| f64::standard_normal(&mut r)).collect()).collect()
}

fn feature(v: &[f64]) -> TangentFeature<f64> {
    TangentFeature { vec: v.to_vec(), width: 2, tag: ThetaTag::Current }
}

fn space(count: usize, seed: u64) -> Vec<AggregatedFeatures<f64>> {
    gen_action_space::<f64, _>(GraphKind::Er { p: 0.4 }, count, 12, 5, &mut rng::derive(seed, &[]))
        .unwrap()
        .aggregate_all(Aggregation::default())
}

#[test]
fn sherman_morrison_chain_matches_dense_inverse() {
    let dim = 20;
    let lambda = 0.3;
    let feats = random_features(50, dim, 1);
    let mut state = UncertaintyState::new(InverseMode::Full, dim, lambda, 2).unwrap();
    let mut u = DMatrix::<f64>::identity(dim, dim) * lambda;
    for phi in &feats {
        state.update(&feature(phi)).unwrap();
        let v = DVector::from_column_slice(phi);
        u += &v * v.transpose();
    }
    let dense = u.try_inverse().unwrap();
    let ours = to_na(state.inverse_matrix().unwrap());
    let rel = (&ours - &dense).norm() / dense.norm();
    assert!(rel < 1e-8, "relative Frobenius error {rel}");
}

#[test]
fn sigma_matches_dense_quadratic_form() {
    let dim = 6;
    let feats = random_features(9, dim, 2);
    let mut state = UncertaintyState::new(InverseMode::Full, dim, 0.5, 2).unwrap();
    let mut diag_state = UncertaintyState::new(InverseMode::Diagonal, dim, 0.5, 2).unwrap();
    let mut u = DMatrix::<f64>::identity(dim, dim) * 0.5;
    for phi in &feats[..8] {
        state.update(&feature(phi)).unwrap();
        diag_state.update(&feature(phi)).unwrap();
        let v = DVector::from_column_slice(phi);
        u += &v * v.transpose();
    }
    let q = DVector::from_column_slice(&feats[8]);
    let expect = (q.transpose() * u.clone().try_inverse().unwrap() * &q)[(0, 0)];
    let got = state.sigma_sq(&feature(&feats[8])).unwrap();
    assert!((got - expect).abs() < 1e-10 * expect.abs().max(1.0));
    let expect_diag: f64 = (0..dim).map(|j| q[j] * q[j] / u[(j, j)]).sum();
    let got_diag = diag_state.sigma_sq(&feature(&feats[8])).unwrap();
    assert!((got_diag - expect_diag).abs() < 1e-12 * expect_diag);
}

#[test]
fn log_det_growth_matches_dense_determinant() {
    let dim = 8;
    let lambda = 0.2;
    let feats = random_features(15, dim, 3);
    let mut state = UncertaintyState::new(InverseMode::Full, dim, lambda, 2).unwrap();
    let mut u = DMatrix::<f64>::identity(dim, dim) * lambda;
    for phi in &feats {
        state.update(&feature(phi)).unwrap();
        let v = DVector::from_column_slice(phi);
        u += &v * v.transpose();
    }
    let expect = u.determinant().ln() - dim as f64 * lambda.ln();
    assert!((state.log_det_growth() - expect).abs() < 1e-9);
    assert!((dense_log_det_growth(&feats, lambda).unwrap() - expect).abs() < 1e-9);
}

#[test]
fn cholesky_and_inverse_match_nalgebra() {
    let a = random_features(7, 7, 4);
    let am = Matrix::from_rows(&a).unwrap();
    let mut spd = am.matmul(&am.transpose()).unwrap();
    spd.add_diag(0.5);
    let ours = chol(&spd).unwrap();
    assert_eq!(ours.jitter, 0.0);
    let theirs = to_na(&spd).cholesky().unwrap().l();
    assert!((to_na(&ours.lower) - theirs).norm() < 1e-10);
    let inv = spd_inverse(&spd).unwrap();
    let dense = to_na(&spd).try_inverse().unwrap();
    assert!((to_na(&inv) - &dense).norm() / dense.norm() < 1e-10);
}

#[test]
fn eigenvalues_match_nalgebra() {
    let a = random_features(9, 9, 5);
    let mut m = Matrix::from_rows(&a).unwrap();
    m.symmetrize();
    let ours = symmetric_eigen(&m).unwrap().values;
    let mut theirs: Vec<f64> = to_na(&m).symmetric_eigen().eigenvalues.iter().copied().collect();
    theirs.sort_by(f64::total_cmp);
    for (x, y) in ours.iter().zip(&theirs) {
        assert!((x - y).abs() < 1e-10, "{x} vs {y}");
    }
}

#[test]
fn effective_dimension_matches_eigen_oracle() {
    for seed in 0..20 {
        let a = random_features(3, 3, 100 + seed);
        let am = Matrix::from_rows(&a).unwrap();
        let k = am.matmul(&am.transpose()).unwrap();
        let (t, lambda) = (50, 0.7);
        let ev = to_na(&k).symmetric_eigen().eigenvalues;
        let rho = ev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let num: f64 = ev.iter().map(|&e| (1.0 + t as f64 * e.max(0.0) / lambda).ln()).sum();
        let expect = num / (1.0 + t as f64 * rho / lambda).ln();
        let got = effective_dimension(&k, t, lambda).unwrap();
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }
}

#[test]
fn gp_posterior_matches_dense_formula() {
    let a = random_features(5, 5, 6);
    let am = Matrix::from_rows(&a).unwrap();
    let k = am.matmul(&am.transpose()).unwrap();
    let y = [0.3, -1.2, 0.8, 0.0, 2.1];
    let s = 0.4;
    let (mean, cov) = gp_posterior(&k, &y, s).unwrap();
    let kn = to_na(&k);
    let reg = (&kn + DMatrix::identity(5, 5) * s).try_inverse().unwrap();
    let m_expect = &kn * &reg * DVector::from_column_slice(&y);
    let c_expect = &kn - &kn * &reg * &kn;
    for i in 0..5 {
        assert!((mean[i] - m_expect[i]).abs() < 1e-10);
    }
    assert!((to_na(&cov) - c_expect).norm() < 1e-10);
}

#[test]
fn gp_posterior_interpolates_at_tiny_noise() {
    let a = random_features(4, 6, 7);
    let am = Matrix::from_rows(&a).unwrap();
    let mut k = am.matmul(&am.transpose()).unwrap();
    k.add_diag(1.0);
    let y = [1.0, -0.5, 0.25, 2.0];
    let (mean, _) = gp_posterior(&k, &y, 1e-8).unwrap();
    for (m, t) in mean.iter().zip(&y) {
        assert!((m - t).abs() < 1e-4);
    }
}

#[test]
fn gntk_entries_are_finite_difference_gradient_products() {
    let aggs = space(4, 8);
    let params = GnnParams::<f64>::init(2, 6, 5, &mut rng::derive(9, &[])).unwrap();
    let k = empirical_gntk(&aggs, &params).unwrap();
    let h = 1e-6;
    let grads: Vec<Vec<f64>> = aggs
        .iter()
        .map(|a| {
            (0..params.total_dim())
                .map(|j| {
                    let mut p = params.clone();
                    p.as_mut_slice()[j] += h;
                    let up = p.forward_gnn(a).unwrap();
                    p.as_mut_slice()[j] -= 2.0 * h;
                    let down = p.forward_gnn(a).unwrap();
                    (up - down) / (2.0 * h)
                })
                .collect()
        })
        .collect();
    for i in 0..4 {
        for j in 0..4 {
            let expect: f64 = grads[i].iter().zip(&grads[j]).map(|(x, y)| x * y).sum::<f64>() / 6.0;
            let got = k.entries.row(i)[j];
            assert!((got - expect).abs() < 1e-6 * expect.abs().max(1.0), "K[{i}][{j}] {got} vs {expect}");
        }
    }
}

#[test]
fn linear_reward_is_inner_product_with_mean_row() {
    let mut r = rng::derive(10, &[]);
    let g = gen_er::<f64, _>(6, 0.5, 3, &mut r).unwrap();
    let agg = g.aggregate(false);
    let theta = [0.5, -1.0, 2.0];
    let table = linear_reward_with(std::slice::from_ref(&agg), &theta).unwrap();
    let mut expect = 0.0;
    for i in 0..6 {
        for (k, t) in theta.iter().enumerate() {
            expect += t * agg.row(i)[k] / 6.0;
        }
    }
    assert!((table.mu[0] - expect).abs() < 1e-14);
}
