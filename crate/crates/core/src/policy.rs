//! Design-matrix bookkeeping `U_t = lambda I + sum_s phi_s phi_s^T` over
//! tangent features, and the per-round selection rules built on it.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::tangent::TangentFeature;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("no actions to choose from")]
    EmptyActions,

    #[error("active set is empty")]
    EmptyActiveSet,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InverseMode {
    /// Exact `U^-1` maintained by Sherman–Morrison updates (`p x p` memory).
    Full,
    /// Only the diagonal of `U` is kept and inverted.
    #[default]
    Diagonal,
}

#[derive(Debug, Clone)]
enum Inverse<F> {
    Full(Matrix<F>),
    Diagonal(Vec<F>),
}

/// Regularized design matrix over scaled tangent features.
///
/// Features already carry the `1/sqrt(m)` factor, so
/// `sigma^2 = phi^T U^-1 phi` with `U = lambda I + sum phi phi^T`.
#[derive(Debug, Clone)]
pub struct UncertaintyState<F> {
    inverse: Inverse<F>,
    lambda: F,
    width: usize,
    dim: usize,
    rounds: usize,
    /// `sum_s ln(1 + phi_s^T U_{s-1}^-1 phi_s)`, i.e. `ln det U_t - ln det U_0`
    /// by the matrix determinant lemma (full mode only).
    log_det_growth: F,
}

impl<F: Scalar> UncertaintyState<F> {
    pub fn new(mode: InverseMode, dim: usize, lambda: F, width: usize) -> Result<Self, PolicyError> {
        if !(lambda > F::zero()) {
            return Err(PolicyError::InvalidParameter(format!("lambda must be > 0, got {lambda}")));
        }
        let inverse = match mode {
            InverseMode::Full => {
                let mut inv = Matrix::identity(dim);
                inv.scale(F::one() / lambda);
                Inverse::Full(inv)
            }
            InverseMode::Diagonal => Inverse::Diagonal(vec![lambda; dim]),
        };
        Ok(Self { inverse, lambda, width, dim, rounds: 0, log_det_growth: F::zero() })
    }

    pub fn mode(&self) -> InverseMode {
        match self.inverse {
            Inverse::Full(_) => InverseMode::Full,
            Inverse::Diagonal(_) => InverseMode::Diagonal,
        }
    }

    pub fn lambda(&self) -> F {
        self.lambda
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    /// `U^-1` in full mode.
    pub fn inverse_matrix(&self) -> Option<&Matrix<F>> {
        match &self.inverse {
            Inverse::Full(m) => Some(m),
            Inverse::Diagonal(_) => None,
        }
    }

    /// Diagonal of `U` in diagonal mode.
    pub fn diagonal(&self) -> Option<&[F]> {
        match &self.inverse {
            Inverse::Full(_) => None,
            Inverse::Diagonal(d) => Some(d),
        }
    }

    pub fn log_det_growth(&self) -> F {
        self.log_det_growth
    }

    fn check(&self, phi: &[F]) -> Result<(), PolicyError> {
        if phi.len() != self.dim {
            return Err(PolicyError::DimensionMismatch { expected: self.dim, actual: phi.len() });
        }
        Ok(())
    }

    /// `phi^T U^-1 phi` (clamped at zero against rounding).
    pub fn sigma_sq(&self, tf: &TangentFeature<F>) -> Result<F, PolicyError> {
        let phi = &tf.vec;
        self.check(phi)?;
        let v = match &self.inverse {
            Inverse::Full(inv) => {
                let mut acc = F::zero();
                for i in 0..self.dim {
                    let pi = phi[i];
                    if pi == F::zero() {
                        continue;
                    }
                    acc += pi * crate::scalar::dot(inv.row(i), phi);
                }
                acc
            }
            Inverse::Diagonal(d) => phi.iter().zip(d).map(|(&x, &u)| x * x / u).sum(),
        };
        Ok(v.max(F::zero()))
    }

    pub fn sigma(&self, tf: &TangentFeature<F>) -> Result<F, PolicyError> {
        Ok(self.sigma_sq(tf)?.sqrt())
    }

    /// `U <- U + phi phi^T`.
    pub fn update(&mut self, tf: &TangentFeature<F>) -> Result<(), PolicyError> {
        let phi = &tf.vec;
        self.check(phi)?;
        match &mut self.inverse {
            Inverse::Full(inv) => {
                let u = inv.matvec(phi).expect("checked dimension");
                let denom = F::one() + crate::scalar::dot(phi, &u);
                inv.add_outer(-F::one() / denom, &u);
                self.log_det_growth += denom.ln();
            }
            Inverse::Diagonal(d) => {
                for (u, &x) in d.iter_mut().zip(phi) {
                    *u += x * x;
                }
            }
        }
        self.rounds += 1;
        Ok(())
    }
}

// ── Selection rules ─────────────────────────────────────────────────────

/// Index of the largest value, lowest index on ties. NaN never wins.
pub fn argmax<F: Scalar>(values: &[F]) -> Option<usize> {
    let mut best: Option<(usize, F)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            None if !v.is_nan() => best = Some((i, v)),
            Some((_, b)) if v > b => best = Some((i, v)),
            _ => {}
        }
    }
    best.map(|(i, _)| i)
}

fn check_pair<F>(means: &[F], sigmas: &[F]) -> Result<(), PolicyError> {
    if means.is_empty() {
        return Err(PolicyError::EmptyActions);
    }
    if means.len() != sigmas.len() {
        return Err(PolicyError::DimensionMismatch { expected: means.len(), actual: sigmas.len() });
    }
    Ok(())
}

/// Thompson step: `r_hat(G) = f(G) + nu sigma(G) z_G` with independent
/// standard normal `z_G`; returns the argmax and the sampled scores.
pub fn ts_select<F: Scalar, R: Rng + ?Sized>(
    means: &[F],
    sigmas: &[F],
    nu: F,
    rng: &mut R,
) -> Result<(usize, Vec<F>), PolicyError> {
    check_pair(means, sigmas)?;
    if !(nu >= F::zero()) {
        return Err(PolicyError::InvalidParameter(format!("nu must be >= 0, got {nu}")));
    }
    let samples: Vec<F> = means.iter().zip(sigmas).map(|(&m, &s)| m + nu * s * F::standard_normal(rng)).collect();
    let idx = argmax(&samples).ok_or(PolicyError::EmptyActions)?;
    Ok((idx, samples))
}

/// `argmax f(G) + beta sigma(G)`.
pub fn ucb_select<F: Scalar>(means: &[F], sigmas: &[F], beta: F) -> Result<usize, PolicyError> {
    check_pair(means, sigmas)?;
    if !(beta >= F::zero()) {
        return Err(PolicyError::InvalidParameter(format!("beta must be >= 0, got {beta}")));
    }
    let index: Vec<F> = means.iter().zip(sigmas).map(|(&m, &s)| m + beta * s).collect();
    argmax(&index).ok_or(PolicyError::EmptyActions)
}

/// Surviving candidates of phased elimination, ascending action indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSet {
    members: Vec<usize>,
}

impl ActiveSet {
    pub fn full(count: usize) -> Self {
        Self { members: (0..count).collect() }
    }

    pub fn from_indices(mut members: Vec<usize>) -> Result<Self, PolicyError> {
        if members.is_empty() {
            return Err(PolicyError::EmptyActiveSet);
        }
        members.sort_unstable();
        members.dedup();
        Ok(Self { members })
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.members.binary_search(&i).is_ok()
    }
}

/// One phased-elimination round over the full-length `means`/`sigmas`.
///
/// Plays the most uncertain surviving action (the greedy one once a single
/// action is left), then drops every survivor whose upper bound
/// `f + beta sigma` is below the best lower bound `max (f - beta sigma)`.
pub fn pe_step<F: Scalar>(
    means: &[F],
    sigmas: &[F],
    beta: F,
    active: &ActiveSet,
) -> Result<(usize, ActiveSet), PolicyError> {
    check_pair(means, sigmas)?;
    if active.is_empty() {
        return Err(PolicyError::EmptyActiveSet);
    }
    if let Some(&bad) = active.members.iter().find(|&&i| i >= means.len()) {
        return Err(PolicyError::DimensionMismatch { expected: means.len(), actual: bad + 1 });
    }
    if !(beta >= F::zero()) {
        return Err(PolicyError::InvalidParameter(format!("beta must be >= 0, got {beta}")));
    }
    let members = &active.members;
    let selected = if members.len() == 1 {
        members[0]
    } else {
        let s: Vec<F> = members.iter().map(|&i| sigmas[i]).collect();
        members[argmax(&s).ok_or(PolicyError::EmptyActiveSet)?]
    };

    let lcb: Vec<F> = members.iter().map(|&i| means[i] - beta * sigmas[i]).collect();
    let holder = argmax(&lcb).ok_or(PolicyError::EmptyActiveSet)?;
    let best_lcb = lcb[holder];
    let survivors: Vec<usize> = members
        .iter()
        .enumerate()
        .filter(|&(k, &i)| k == holder || means[i] + beta * sigmas[i] >= best_lcb)
        .map(|(_, &i)| i)
        .collect();
    Ok((selected, ActiveSet { members: survivors }))
}

/// Uniform index in `0..count`.
pub fn random_select<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Result<usize, PolicyError> {
    if count == 0 {
        return Err(PolicyError::EmptyActions);
    }
    Ok(rng.random_range(0..count))
}
