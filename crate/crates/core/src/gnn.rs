//! The reward model: a bias-free ReLU MLP in NTK parameterization applied to
//! every aggregated node row, averaged over nodes.
//!
//! ```text
//! f1(h) = W1 h
//! fl(h) = W_l ReLU(f_{l-1}(h)) / sqrt(m)       2 <= l <= L
//! f_gnn(G) = (1/N) sum_i f_L(h_i)
//! ```
//!
//! The backward pass is written out by hand; [`GnnParams::grad_gnn`]
//! returns the gradient in the same flat layout as the parameters.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::AggregatedFeatures;
use crate::scalar::{dot, norm_sq, paired_dot, Scalar};

#[derive(Debug, Error)]
pub enum GnnError {
    #[error("width {0} must be even for the zero-output initialization")]
    OddWidth(usize),

    #[error("network needs at least 2 layers, got {0}")]
    TooFewLayers(usize),

    #[error("width and input dimension must be positive")]
    ZeroDimension,

    #[error("dimension mismatch: {what} expected {expected}, got {actual}")]
    DimensionMismatch { what: &'static str, expected: usize, actual: usize },

    #[error("history is empty")]
    EmptyHistory,

    #[error("non-finite reward {0}")]
    NonFiniteReward(f64),

    #[error("invalid trainer configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Layer sizes of the MLP: `d -> m -> ... -> m -> 1` with `layers` weight matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "m")]
    pub width: usize,
    #[serde(rename = "d")]
    pub input_dim: usize,
}

impl Architecture {
    pub fn new(layers: usize, width: usize, input_dim: usize) -> Result<Self, GnnError> {
        if layers < 2 {
            return Err(GnnError::TooFewLayers(layers));
        }
        if width == 0 || input_dim == 0 {
            return Err(GnnError::ZeroDimension);
        }
        Ok(Self { layers, width, input_dim })
    }

    /// `p = d m + (L - 2) m^2 + m`.
    pub fn total_dim(&self) -> usize {
        self.input_dim * self.width + (self.layers - 2) * self.width * self.width + self.width
    }

    fn hidden_offset(&self, l: usize) -> usize {
        // l is the 0-based index of a hidden m x m matrix (layer l + 2).
        self.input_dim * self.width + l * self.width * self.width
    }

    fn output_offset(&self) -> usize {
        self.input_dim * self.width + (self.layers - 2) * self.width * self.width
    }
}

/// Flattened weights `(W1, ..., WL)`, each row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnParams<F> {
    arch: Architecture,
    theta: Vec<F>,
}

/// Cached forward pass of one node row.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpTrace<F> {
    pub value: F,
    /// Pre-activations `f1, ..., f_{L-1}`, each of length `m`.
    pub pre_activations: Vec<Vec<F>>,
}

/// Scratch buffers reused across node evaluations.
#[derive(Debug, Clone)]
pub(crate) struct Workspace<F> {
    pre: Vec<Vec<F>>,
    act: Vec<Vec<F>>,
    delta: Vec<F>,
    delta_prev: Vec<F>,
}

impl<F: Scalar> Workspace<F> {
    pub(crate) fn new(arch: &Architecture) -> Self {
        let hidden = arch.layers - 1;
        let m = arch.width;
        Self {
            pre: vec![vec![F::zero(); m]; hidden],
            act: vec![vec![F::zero(); m]; hidden],
            delta: vec![F::zero(); m],
            delta_prev: vec![F::zero(); m],
        }
    }
}

/// Per-row workspaces so a graph's forward pass can be replayed backwards.
#[derive(Debug, Clone)]
pub(crate) struct NodeCache<F> {
    nodes: Vec<Workspace<F>>,
}

impl<F> Default for NodeCache<F> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
    }
}

#[inline]
fn relu<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        x
    } else {
        F::zero()
    }
}

impl<F: Scalar> GnnParams<F> {
    /// Zero-output initialization.
    ///
    /// Each layer is sampled at half width and mirrored: `W1 = [A; A]`,
    /// hidden layers are `diag(B, B)`, and the output layer is `[c, -c]`.
    /// Both halves of every hidden layer then carry bitwise identical
    /// activations and the output cancels exactly for any input. Entries
    /// follow He scaling under the `1/sqrt(m)` parameterization: `A ~ N(0, 2)`,
    /// `B ~ N(0, 4)` (half of each row is structurally zero), `c ~ N(0, 2)`.
    pub fn init<R: Rng + ?Sized>(layers: usize, width: usize, input_dim: usize, rng: &mut R) -> Result<Self, GnnError> {
        let arch = Architecture::new(layers, width, input_dim)?;
        if width % 2 != 0 {
            return Err(GnnError::OddWidth(width));
        }
        let half = width / 2;
        let d = input_dim;
        let mut theta = vec![F::zero(); arch.total_dim()];

        let s1 = F::of(2f64.sqrt());
        for j in 0..half {
            for k in 0..d {
                let w = F::standard_normal(rng) * s1;
                theta[j * d + k] = w;
                theta[(j + half) * d + k] = w;
            }
        }
        let sh = F::of(2.0);
        for l in 0..layers - 2 {
            let off = arch.hidden_offset(l);
            for j in 0..half {
                for k in 0..half {
                    let w = F::standard_normal(rng) * sh;
                    theta[off + j * width + k] = w;
                    theta[off + (j + half) * width + (k + half)] = w;
                }
            }
        }
        let off = arch.output_offset();
        for j in 0..half {
            let w = F::standard_normal(rng) * s1;
            theta[off + j] = w;
            theta[off + j + half] = -w;
        }
        Ok(Self { arch, theta })
    }

    pub fn from_flat(arch: Architecture, theta: Vec<F>) -> Result<Self, GnnError> {
        if theta.len() != arch.total_dim() {
            return Err(GnnError::DimensionMismatch {
                what: "parameter vector",
                expected: arch.total_dim(),
                actual: theta.len(),
            });
        }
        Ok(Self { arch, theta })
    }

    #[inline]
    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.arch.width
    }

    #[inline]
    pub fn layers(&self) -> usize {
        self.arch.layers
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    #[inline]
    pub fn total_dim(&self) -> usize {
        self.theta.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[F] {
        &self.theta
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.theta
    }

    pub fn into_flat(self) -> Vec<F> {
        self.theta
    }

    pub fn norm_sq(&self) -> F {
        norm_sq(&self.theta)
    }

    /// Layer `l` (1-based) as a row-major slice.
    pub fn layer(&self, l: usize) -> &[F] {
        let a = &self.arch;
        assert!((1..=a.layers).contains(&l), "layer index out of range");
        if l == 1 {
            &self.theta[..a.input_dim * a.width]
        } else if l == a.layers {
            &self.theta[a.output_offset()..]
        } else {
            let off = a.hidden_offset(l - 2);
            &self.theta[off..off + a.width * a.width]
        }
    }

    #[inline]
    fn inv_sqrt_m(&self) -> F {
        F::one() / F::of_usize(self.arch.width).sqrt()
    }

    fn check_input(&self, len: usize) -> Result<(), GnnError> {
        if len != self.arch.input_dim {
            return Err(GnnError::DimensionMismatch {
                what: "input features",
                expected: self.arch.input_dim,
                actual: len,
            });
        }
        Ok(())
    }

    /// Forward pass for one row, leaving pre-activations and activations in `ws`.
    pub(crate) fn node_forward(&self, h: &[F], ws: &mut Workspace<F>) -> F {
        let a = &self.arch;
        let (m, d) = (a.width, a.input_dim);
        let s = self.inv_sqrt_m();
        let w1 = &self.theta[..m * d];
        for ((row, z), y) in w1.chunks_exact(d).zip(ws.pre[0].iter_mut()).zip(ws.act[0].iter_mut()) {
            *z = dot(row, h);
            *y = relu(*z);
        }
        for l in 0..a.layers - 2 {
            let off = a.hidden_offset(l);
            let w = &self.theta[off..off + m * m];
            let (prev, next) = ws.act.split_at_mut(l + 1);
            let input = &prev[l];
            for ((row, z), y) in w.chunks_exact(m).zip(ws.pre[l + 1].iter_mut()).zip(next[0].iter_mut()) {
                *z = dot(row, input) * s;
                *y = relu(*z);
            }
        }
        let wl = &self.theta[a.output_offset()..];
        paired_dot(wl, &ws.act[a.layers - 2]) * s
    }

    /// Adds `scale * d f_mlp(h) / d theta` to `grad`; requires a preceding
    /// [`Self::node_forward`] on the same `h` and `ws`.
    pub(crate) fn node_backward(&self, h: &[F], ws: &mut Workspace<F>, scale: F, grad: &mut [F]) {
        let a = &self.arch;
        let (m, d) = (a.width, a.input_dim);
        let s = self.inv_sqrt_m();
        let top = a.layers - 2;

        let out_off = a.output_offset();
        let wl = &self.theta[out_off..];
        let ss = scale * s;
        let (g_in, g_out) = grad.split_at_mut(out_off);
        for ((((g, &y), &z), dl), &w) in
            g_out.iter_mut().zip(&ws.act[top]).zip(&ws.pre[top]).zip(ws.delta.iter_mut()).zip(wl)
        {
            *g += ss * y;
            *dl = if z > F::zero() { ss * w } else { F::zero() };
        }

        for l in (0..a.layers - 2).rev() {
            // hidden matrix l maps act[l] -> pre[l + 1]; delta is d/d pre[l + 1]
            let off = a.hidden_offset(l);
            let w = &self.theta[off..off + m * m];
            let gw = &mut g_in[off..off + m * m];
            ws.delta_prev.iter_mut().for_each(|x| *x = F::zero());
            let input = &ws.act[l];
            for ((grow, wrow), &di) in gw.chunks_exact_mut(m).zip(w.chunks_exact(m)).zip(&ws.delta) {
                if di == F::zero() {
                    continue;
                }
                let sdi = s * di;
                for (((g, &x), dp), &wij) in grow.iter_mut().zip(input).zip(ws.delta_prev.iter_mut()).zip(wrow) {
                    *g += sdi * x;
                    *dp += sdi * wij;
                }
            }
            for ((dl, &dp), &z) in ws.delta.iter_mut().zip(&ws.delta_prev).zip(&ws.pre[l]) {
                *dl = if z > F::zero() { dp } else { F::zero() };
            }
        }

        for (row, &di) in g_in[..m * d].chunks_exact_mut(d).zip(&ws.delta) {
            if di == F::zero() {
                continue;
            }
            for (g, &hk) in row.iter_mut().zip(h) {
                *g += di * hk;
            }
        }
    }

    pub fn forward_mlp(&self, h: &[F]) -> Result<MlpTrace<F>, GnnError> {
        self.check_input(h.len())?;
        let mut ws = Workspace::new(&self.arch);
        let value = self.node_forward(h, &mut ws);
        Ok(MlpTrace { value, pre_activations: ws.pre })
    }

    fn check_agg(&self, agg: &AggregatedFeatures<F>) -> Result<(), GnnError> {
        self.check_input(agg.dim())?;
        if agg.n_nodes() == 0 {
            return Err(GnnError::DimensionMismatch { what: "node rows", expected: 1, actual: 0 });
        }
        Ok(())
    }

    /// `(1/N) sum_i f_mlp(h_i)` over all (padded) rows.
    pub fn forward_gnn(&self, agg: &AggregatedFeatures<F>) -> Result<F, GnnError> {
        self.check_agg(agg)?;
        let mut ws = Workspace::new(&self.arch);
        let mut total = F::zero();
        for i in 0..agg.n_nodes() {
            let h = agg.row(i);
            if h.iter().all(|&x| x == F::zero()) {
                continue;
            }
            total += self.node_forward(h, &mut ws);
        }
        Ok(total / F::of_usize(agg.n_nodes()))
    }

    /// Adds `scale * grad f_gnn` into `grad` and returns `f_gnn`.
    ///
    /// All-zero rows contribute nothing to either (no biases), so they are skipped.
    pub(crate) fn accumulate(&self, agg: &AggregatedFeatures<F>, ws: &mut Workspace<F>, scale: F, grad: &mut [F]) -> F {
        let n = F::of_usize(agg.n_nodes());
        let node_scale = scale / n;
        let mut total = F::zero();
        for i in 0..agg.n_nodes() {
            let h = agg.row(i);
            if h.iter().all(|&x| x == F::zero()) {
                continue;
            }
            total += self.node_forward(h, ws);
            if node_scale != F::zero() {
                self.node_backward(h, ws, node_scale, grad);
            }
        }
        total / n
    }

    /// Forward pass over all rows keeping every row's activations in `cache`.
    pub(crate) fn forward_cached(&self, agg: &AggregatedFeatures<F>, cache: &mut NodeCache<F>) -> F {
        let n = agg.n_nodes();
        while cache.nodes.len() < n {
            cache.nodes.push(Workspace::new(&self.arch));
        }
        let mut total = F::zero();
        for i in 0..n {
            let h = agg.row(i);
            if h.iter().all(|&x| x == F::zero()) {
                continue;
            }
            total += self.node_forward(h, &mut cache.nodes[i]);
        }
        total / F::of_usize(n)
    }

    /// Adds `scale * grad f_gnn` using activations from [`Self::forward_cached`].
    pub(crate) fn backward_cached(
        &self,
        agg: &AggregatedFeatures<F>,
        cache: &mut NodeCache<F>,
        scale: F,
        grad: &mut [F],
    ) {
        let n = agg.n_nodes();
        let node_scale = scale / F::of_usize(n);
        for i in 0..n {
            let h = agg.row(i);
            if h.iter().all(|&x| x == F::zero()) {
                continue;
            }
            self.node_backward(h, &mut cache.nodes[i], node_scale, grad);
        }
    }

    pub fn value_and_grad(&self, agg: &AggregatedFeatures<F>) -> Result<(F, Vec<F>), GnnError> {
        self.check_agg(agg)?;
        let mut ws = Workspace::new(&self.arch);
        let mut grad = vec![F::zero(); self.total_dim()];
        let value = self.accumulate(agg, &mut ws, F::one(), &mut grad);
        Ok((value, grad))
    }

    /// Exact gradient of [`Self::forward_gnn`] with respect to the flat
    /// parameters (ReLU subgradient 0 at 0).
    pub fn grad_gnn(&self, agg: &AggregatedFeatures<F>) -> Result<Vec<F>, GnnError> {
        Ok(self.value_and_grad(agg)?.1)
    }

    /// Node-averaged pre-activation of the last hidden layer, `f_{L-1}`.
    pub fn representation(&self, agg: &AggregatedFeatures<F>) -> Result<Vec<F>, GnnError> {
        self.check_agg(agg)?;
        let mut ws = Workspace::new(&self.arch);
        let top = self.arch.layers - 2;
        let mut out = vec![F::zero(); self.arch.width];
        for i in 0..agg.n_nodes() {
            let h = agg.row(i);
            if h.iter().all(|&x| x == F::zero()) {
                continue;
            }
            self.node_forward(h, &mut ws);
            for (o, &z) in out.iter_mut().zip(&ws.pre[top]) {
                *o += z;
            }
        }
        let n = F::of_usize(agg.n_nodes());
        out.iter_mut().for_each(|x| *x /= n);
        Ok(out)
    }

    /// Sign pattern of every hidden pre-activation over all rows; used to
    /// detect finite-difference steps that cross a ReLU kink.
    pub fn activation_pattern(&self, agg: &AggregatedFeatures<F>) -> Result<Vec<bool>, GnnError> {
        self.check_agg(agg)?;
        let mut ws = Workspace::new(&self.arch);
        let mut pattern = Vec::with_capacity(agg.n_nodes() * self.arch.width * (self.arch.layers - 1));
        for i in 0..agg.n_nodes() {
            self.node_forward(agg.row(i), &mut ws);
            for layer in &ws.pre {
                pattern.extend(layer.iter().map(|&z| z > F::zero()));
            }
        }
        Ok(pattern)
    }

    // ── checkpoint ──────────────────────────────────────────────────────

    /// JSON header `{"L":..,"m":..,"d":..}` and a newline, followed by the
    /// flat parameters as little-endian `f64`.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), GnnError> {
        let header = serde_json::to_string(&self.arch).map_err(|e| GnnError::Checkpoint(e.to_string()))?;
        w.write_all(header.as_bytes())?;
        w.write_all(b"\n")?;
        for x in &self.theta {
            w.write_all(&x.as_f64().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, GnnError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| GnnError::Checkpoint("missing header terminator".into()))?;
        let arch: Architecture =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| GnnError::Checkpoint(e.to_string()))?;
        let arch = Architecture::new(arch.layers, arch.width, arch.input_dim)?;
        let body = &bytes[nl + 1..];
        if body.len() != arch.total_dim() * 8 {
            return Err(GnnError::Checkpoint(format!(
                "expected {} parameter bytes, found {}",
                arch.total_dim() * 8,
                body.len()
            )));
        }
        let theta =
            body.chunks_exact(8).map(|c| F::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk")))).collect();
        Self::from_flat(arch, theta)
    }
}

// ── History and loss ────────────────────────────────────────────────────

/// Observed `(graph, reward)` pairs in arrival order.
#[derive(Debug, Clone)]
pub struct HistoryBuffer<'a, F> {
    entries: Vec<(&'a AggregatedFeatures<F>, F)>,
}

impl<F> Default for HistoryBuffer<'_, F> {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

impl<'a, F: Scalar> HistoryBuffer<'a, F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, agg: &'a AggregatedFeatures<F>, reward: F) -> Result<(), GnnError> {
        if !reward.is_finite() {
            return Err(GnnError::NonFiniteReward(reward.as_f64()));
        }
        self.entries.push((agg, reward));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(&'a AggregatedFeatures<F>, F)] {
        &self.entries
    }
}

/// Ridge objective `(1/2t) sum (f(G_i) - y_i)^2 + (m lambda / 2) |theta|^2`.
pub fn loss<F: Scalar>(params: &GnnParams<F>, history: &HistoryBuffer<'_, F>, lambda: F) -> Result<F, GnnError> {
    if history.is_empty() {
        return Err(GnnError::EmptyHistory);
    }
    let mut sq = F::zero();
    for (agg, y) in history.entries() {
        let r = params.forward_gnn(agg)? - *y;
        sq += r * r;
    }
    let t = F::of_usize(history.len());
    let m = F::of_usize(params.width());
    Ok(sq / (F::of(2.0) * t) + m * lambda * F::of(0.5) * params.norm_sq())
}
