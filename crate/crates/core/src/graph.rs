//! Attributed undirected graphs, the random generators used to build action
//! spaces, and the one-hop normalized feature aggregation that feeds the GNN.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::scalar::{norm_sq, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("dimension mismatch: {what} expected {expected}, got {actual}")]
    DimensionMismatch { what: &'static str, expected: usize, actual: usize },

    #[error("adjacency is not symmetric at ({0}, {1})")]
    NotSymmetric(usize, usize),

    #[error("self loop at node {0}")]
    SelfLoop(usize),

    #[error("adjacency entry ({0}, {1}) is {2}, expected 0 or 1")]
    NonBinaryEntry(usize, usize, u8),

    #[error("non-finite feature at node {0}")]
    NonFiniteFeature(usize),

    #[error("graph must have at least one node")]
    Empty,

    #[error("cannot pad a {have}-node graph down to {target} nodes")]
    TargetTooSmall { have: usize, target: usize },

    #[error("edge probability {0} outside [0, 1]")]
    InvalidProbability(f64),

    #[error("feature dimension must be at least 1")]
    ZeroFeatureDim,

    #[error("action space must contain at least one graph")]
    EmptyActionSpace,

    #[error("malformed graph json: {0}")]
    Json(String),
}

// ── Graph ───────────────────────────────────────────────────────────────

/// Undirected, unweighted graph without self loops, plus one feature row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph<F> {
    n: usize,
    adjacency: Vec<u8>,
    neighbors: Vec<Vec<usize>>,
    features: Matrix<F>,
}

impl<F: Scalar> Graph<F> {
    /// Validates a `0/1` adjacency matrix (`n x n`, row-major nested rows)
    /// against an `n x d` feature matrix.
    pub fn new(adjacency: &[Vec<u8>], features: Matrix<F>) -> Result<Self, GraphError> {
        let n = adjacency.len();
        if n == 0 {
            return Err(GraphError::Empty);
        }
        let mut flat = Vec::with_capacity(n * n);
        for row in adjacency {
            if row.len() != n {
                return Err(GraphError::DimensionMismatch { what: "adjacency row", expected: n, actual: row.len() });
            }
            flat.extend_from_slice(row);
        }
        Self::from_flat(n, flat, features)
    }

    fn from_flat(n: usize, adjacency: Vec<u8>, features: Matrix<F>) -> Result<Self, GraphError> {
        if features.rows() != n {
            return Err(GraphError::DimensionMismatch { what: "feature rows", expected: n, actual: features.rows() });
        }
        if features.cols() == 0 {
            return Err(GraphError::ZeroFeatureDim);
        }
        for i in 0..n {
            for j in 0..n {
                let a = adjacency[i * n + j];
                if a > 1 {
                    return Err(GraphError::NonBinaryEntry(i, j, a));
                }
                if i == j && a != 0 {
                    return Err(GraphError::SelfLoop(i));
                }
                if a != adjacency[j * n + i] {
                    return Err(GraphError::NotSymmetric(i, j));
                }
            }
            if features.row(i).iter().any(|x| !x.is_finite()) {
                return Err(GraphError::NonFiniteFeature(i));
            }
        }
        let neighbors = (0..n).map(|i| (0..n).filter(|&j| adjacency[i * n + j] == 1).collect()).collect();
        Ok(Self { n, adjacency, neighbors, features })
    }

    /// Builds from an edge list, ignoring duplicate edges.
    pub fn from_edges(n: usize, edges: &[(usize, usize)], features: Matrix<F>) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::Empty);
        }
        let mut adj = vec![0u8; n * n];
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(GraphError::DimensionMismatch { what: "edge endpoint", expected: n, actual: i.max(j) });
            }
            if i == j {
                return Err(GraphError::SelfLoop(i));
            }
            adj[i * n + j] = 1;
            adj[j * n + i] = 1;
        }
        Self::from_flat(n, adj, features)
    }

    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    #[inline]
    pub fn features(&self) -> &Matrix<F> {
        &self.features
    }

    #[inline]
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.n + j] == 1
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Unordered edges `(i, j)` with `i < j`, in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for i in 0..self.n {
            for &j in &self.neighbors[i] {
                if i < j {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn adjacency_rows(&self) -> Vec<Vec<u8>> {
        self.adjacency.chunks(self.n).map(<[u8]>::to_vec).collect()
    }

    /// Appends isolated zero-feature nodes until the graph has `target` nodes.
    pub fn pad_to(&self, target: usize) -> Result<Self, GraphError> {
        if target < self.n {
            return Err(GraphError::TargetTooSmall { have: self.n, target });
        }
        if target == self.n {
            return Ok(self.clone());
        }
        let d = self.feature_dim();
        let mut adj = vec![0u8; target * target];
        for i in 0..self.n {
            adj[i * target..i * target + self.n].copy_from_slice(&self.adjacency[i * self.n..(i + 1) * self.n]);
        }
        let mut feats = Matrix::zeros(target, d);
        for i in 0..self.n {
            feats.row_mut(i).copy_from_slice(self.features.row(i));
        }
        Self::from_flat(target, adj, feats)
    }

    /// `(1/n) * sum_j deg(j)`.
    pub fn average_degree(&self) -> F {
        let total: usize = self.neighbors.iter().map(Vec::len).sum();
        F::of_usize(total) / F::of_usize(self.n)
    }

    /// Relabels nodes so that new node `k` is old node `perm[k]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self, GraphError> {
        let n = self.n;
        if perm.len() != n {
            return Err(GraphError::DimensionMismatch { what: "permutation", expected: n, actual: perm.len() });
        }
        let mut adj = vec![0u8; n * n];
        let mut feats = Matrix::zeros(n, self.feature_dim());
        for (a, &pa) in perm.iter().enumerate() {
            feats.row_mut(a).copy_from_slice(self.features.row(pa));
            for (b, &pb) in perm.iter().enumerate() {
                adj[a * n + b] = self.adjacency[pa * n + pb];
            }
        }
        Self::from_flat(n, adj, feats)
    }

    pub fn aggregate(&self, identity_mode: bool) -> AggregatedFeatures<F> {
        self.aggregate_with(Aggregation { identity_mode, normalize: true })
    }

    /// Row `i` is `normalize(sum_{j in N(i)} x_j)`, or `normalize(x_i)` in
    /// identity mode. A zero vector stays zero.
    pub fn aggregate_with(&self, how: Aggregation) -> AggregatedFeatures<F> {
        let d = self.feature_dim();
        let mut rows = Matrix::zeros(self.n, d);
        for i in 0..self.n {
            let out = rows.row_mut(i);
            if how.identity_mode {
                out.copy_from_slice(self.features.row(i));
            } else {
                for &j in &self.neighbors[i] {
                    for (o, &x) in out.iter_mut().zip(self.features.row(j)) {
                        *o += x;
                    }
                }
            }
            if how.normalize {
                let norm = norm_sq(out).sqrt();
                if norm > F::zero() {
                    out.iter_mut().for_each(|x| *x /= norm);
                }
            }
        }
        AggregatedFeatures { rows, identity_mode: how.identity_mode }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Aggregation {
    /// Replace the adjacency by the identity (feature-only baselines).
    pub identity_mode: bool,
    pub normalize: bool,
}

impl Default for Aggregation {
    fn default() -> Self {
        Self { identity_mode: false, normalize: true }
    }
}

/// Per-node inputs to the MLP: one row per (padded) node.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedFeatures<F> {
    pub rows: Matrix<F>,
    pub identity_mode: bool,
}

impl<F: Scalar> AggregatedFeatures<F> {
    pub fn n_nodes(&self) -> usize {
        self.rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn row(&self, i: usize) -> &[F] {
        self.rows.row(i)
    }

    /// Mean of the rows.
    pub fn mean_row(&self) -> Vec<F> {
        let n = self.n_nodes();
        let mut out = vec![F::zero(); self.dim()];
        for i in 0..n {
            for (o, &x) in out.iter_mut().zip(self.row(i)) {
                *o += x;
            }
        }
        let nf = F::of_usize(n);
        out.iter_mut().for_each(|x| *x /= nf);
        out
    }
}

// ── Generators ──────────────────────────────────────────────────────────

fn gaussian_features<F: Scalar, R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Matrix<F> {
    let data = (0..n * d).map(|_| F::standard_normal(rng)).collect();
    Matrix::from_vec(n, d, data).expect("sized buffer")
}

fn check_dims(n: usize, d: usize) -> Result<(), GraphError> {
    if n == 0 {
        return Err(GraphError::Empty);
    }
    if d == 0 {
        return Err(GraphError::ZeroFeatureDim);
    }
    Ok(())
}

/// Samples edges for every unordered pair `i < j` in row-major order, one
/// uniform draw per pair, keeping the pair when the draw is below `prob(i, j)`.
fn sample_edges<F: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R, mut prob: impl FnMut(usize, usize) -> F) -> Vec<u8> {
    let mut adj = vec![0u8; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let u = F::unit_uniform(rng);
            if u < prob(i, j) {
                adj[i * n + j] = 1;
                adj[j * n + i] = 1;
            }
        }
    }
    adj
}

/// Erdős–Rényi `G(n, p)` with i.i.d. standard normal node features.
/// Features are drawn before edges.
pub fn gen_er<F: Scalar, R: Rng + ?Sized>(n: usize, p: f64, d: usize, rng: &mut R) -> Result<Graph<F>, GraphError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(GraphError::InvalidProbability(p));
    }
    check_dims(n, d)?;
    let features = gaussian_features(n, d, rng);
    let pf = F::of(p);
    let adj = sample_edges(n, rng, |_, _| pf);
    Graph::from_flat(n, adj, features)
}

#[inline]
pub fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Random dot product graph: standard normal features double as latent
/// positions and pair `(i, j)` links with probability `sigmoid(<x_i, x_j>)`.
pub fn gen_rdpg<F: Scalar, R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Result<Graph<F>, GraphError> {
    check_dims(n, d)?;
    let features = gaussian_features(n, d, rng);
    rdpg_from_features(features, rng)
}

/// RDPG edge sampling for fixed latent positions.
pub fn rdpg_from_features<F: Scalar, R: Rng + ?Sized>(
    features: Matrix<F>,
    rng: &mut R,
) -> Result<Graph<F>, GraphError> {
    let n = features.rows();
    check_dims(n, features.cols())?;
    let adj = sample_edges(n, rng, |i, j| sigmoid(crate::scalar::dot(features.row(i), features.row(j))));
    Graph::from_flat(n, adj, features)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GraphKind {
    Er { p: f64 },
    Rdpg,
}

/// Ordered, nonempty list of graphs sharing node count and feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSpace<F> {
    graphs: Vec<Graph<F>>,
}

impl<F: Scalar> ActionSpace<F> {
    pub fn new(graphs: Vec<Graph<F>>) -> Result<Self, GraphError> {
        let first = graphs.first().ok_or(GraphError::EmptyActionSpace)?;
        let (n, d) = (first.n_nodes(), first.feature_dim());
        for g in &graphs {
            if g.n_nodes() != n {
                return Err(GraphError::DimensionMismatch { what: "node count", expected: n, actual: g.n_nodes() });
            }
            if g.feature_dim() != d {
                return Err(GraphError::DimensionMismatch {
                    what: "feature dimension",
                    expected: d,
                    actual: g.feature_dim(),
                });
            }
        }
        Ok(Self { graphs })
    }

    /// Pads every graph to the largest node count present.
    pub fn padded(graphs: Vec<Graph<F>>) -> Result<Self, GraphError> {
        let n = graphs.iter().map(Graph::n_nodes).max().ok_or(GraphError::EmptyActionSpace)?;
        let padded = graphs.iter().map(|g| g.pad_to(n)).collect::<Result<_, _>>()?;
        Self::new(padded)
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.graphs[0].n_nodes()
    }

    pub fn feature_dim(&self) -> usize {
        self.graphs[0].feature_dim()
    }

    pub fn graphs(&self) -> &[Graph<F>] {
        &self.graphs
    }

    pub fn get(&self, i: usize) -> Option<&Graph<F>> {
        self.graphs.get(i)
    }

    pub fn aggregate_all(&self, how: Aggregation) -> Vec<AggregatedFeatures<F>> {
        self.graphs.iter().map(|g| g.aggregate_with(how)).collect()
    }
}

pub fn gen_action_space<F: Scalar, R: Rng + ?Sized>(
    kind: GraphKind,
    count: usize,
    n: usize,
    d: usize,
    rng: &mut R,
) -> Result<ActionSpace<F>, GraphError> {
    if count == 0 {
        return Err(GraphError::EmptyActionSpace);
    }
    let graphs = (0..count)
        .map(|_| match kind {
            GraphKind::Er { p } => gen_er(n, p, d, rng),
            GraphKind::Rdpg => gen_rdpg(n, d, rng),
        })
        .collect::<Result<Vec<_>, _>>()?;
    ActionSpace::new(graphs)
}

// ── JSON ────────────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct GraphJson {
    n: usize,
    edges: Vec<[usize; 2]>,
    features: Vec<Vec<f64>>,
}

impl<F: Scalar> Graph<F> {
    /// `{"n": .., "edges": [[i, j], ..], "features": [[..], ..]}`, 0-based.
    pub fn to_json(&self) -> String {
        let doc = GraphJson {
            n: self.n,
            edges: self.edges().into_iter().map(|(i, j)| [i, j]).collect(),
            features: (0..self.n).map(|i| self.features.row(i).iter().map(|x| x.as_f64()).collect()).collect(),
        };
        serde_json::to_string(&doc).expect("graph json serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let doc: GraphJson = serde_json::from_str(text).map_err(|e| GraphError::Json(e.to_string()))?;
        let rows: Vec<Vec<F>> = doc.features.iter().map(|r| r.iter().map(|&x| F::of(x)).collect()).collect();
        let features = Matrix::from_rows(&rows).map_err(|e| GraphError::Json(e.to_string()))?;
        let edges: Vec<(usize, usize)> = doc.edges.iter().map(|e| (e[0], e[1])).collect();
        Self::from_edges(doc.n, &edges, features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn feats(rows: &[Vec<f64>]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    fn path3() -> Graph<f64> {
        Graph::from_edges(3, &[(0, 1), (1, 2)], feats(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]])).unwrap()
    }

    #[test]
    fn empty_two_node_graph() {
        let g = Graph::new(&[vec![0, 0], vec![0, 0]], feats(&[vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap();
        assert_eq!(g.n_nodes(), 2);
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn single_edge_is_valid() {
        let g = Graph::new(&[vec![0, 1], vec![1, 0]], feats(&[vec![1.0], vec![2.0]])).unwrap();
        assert!(g.has_edge(0, 1) && g.has_edge(1, 0));
    }

    #[test]
    fn validation_errors() {
        let f2 = feats(&[vec![1.0], vec![2.0]]);
        assert_eq!(Graph::new(&[vec![0, 1], vec![0, 0]], f2.clone()), Err(GraphError::NotSymmetric(0, 1)));
        assert_eq!(Graph::new(&[vec![1, 0], vec![0, 0]], f2.clone()), Err(GraphError::SelfLoop(0)));
        assert_eq!(Graph::new(&[vec![0, 2], vec![2, 0]], f2.clone()), Err(GraphError::NonBinaryEntry(0, 1, 2)));
        assert!(matches!(
            Graph::new(&[vec![0, 0, 0], vec![0, 0, 0], vec![0, 0, 0]], f2),
            Err(GraphError::DimensionMismatch { .. })
        ));
        let bad = feats(&[vec![f64::NAN], vec![0.0]]);
        assert_eq!(Graph::new(&[vec![0, 0], vec![0, 0]], bad), Err(GraphError::NonFiniteFeature(0)));
    }

    #[test]
    fn padding() {
        let g = Graph::new(&[vec![0, 1], vec![1, 0]], feats(&[vec![1.0, 3.0], vec![2.0, 4.0]])).unwrap();
        assert_eq!(g.pad_to(2).unwrap(), g);
        let p = g.pad_to(4).unwrap();
        assert_eq!(p.n_nodes(), 4);
        assert!(p.has_edge(0, 1));
        for i in 2..4 {
            assert_eq!(p.degree(i), 0);
            assert!(p.features().row(i).iter().all(|&x| x == 0.0));
        }
        assert_eq!(path3().pad_to(2), Err(GraphError::TargetTooSmall { have: 3, target: 2 }));
    }

    #[test]
    fn er_degenerate_probabilities() {
        let mut r = rng::derive(1, &[]);
        let g0: Graph<f64> = gen_er(12, 0.0, 3, &mut r).unwrap();
        assert_eq!(g0.edge_count(), 0);
        let g1: Graph<f64> = gen_er(12, 1.0, 3, &mut r).unwrap();
        assert_eq!(g1.edge_count(), 12 * 11 / 2);
        assert_eq!(gen_er::<f64, _>(5, 1.5, 3, &mut r), Err(GraphError::InvalidProbability(1.5)));
    }

    #[test]
    fn rdpg_anti_aligned_pair_is_below_half() {
        let x = [0.8, -1.2, 0.4];
        let p = sigmoid(-crate::scalar::dot(&x, &x));
        assert!(p < 0.5);
        assert_eq!(sigmoid(0.0_f64), 0.5);
    }

    #[test]
    fn aggregate_single_neighbor_and_isolated() {
        let g = Graph::from_edges(3, &[(0, 1)], feats(&[vec![1.0, 1.0], vec![3.0, 4.0], vec![5.0, 5.0]])).unwrap();
        let agg = g.aggregate(false);
        assert_eq!(agg.row(0), &[0.6, 0.8]);
        assert!((agg.row(1)[0] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(agg.row(2), &[0.0, 0.0]);
        let ident = g.aggregate(true);
        assert!((ident.row(2)[0] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!(ident.identity_mode);
    }

    #[test]
    fn aggregate_star_center() {
        // center 0 with leaves 1 and 2; hand value (x1 + x2) / |x1 + x2| = (3, 4) / 5
        let g =
            Graph::from_edges(3, &[(0, 1), (0, 2)], feats(&[vec![9.0, 9.0], vec![1.0, 3.0], vec![2.0, 1.0]])).unwrap();
        let agg = g.aggregate(false);
        assert!((agg.row(0)[0] - 0.6).abs() < 1e-15);
        assert!((agg.row(0)[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn aggregate_unnormalized_ablation() {
        let agg = path3().aggregate_with(Aggregation { identity_mode: false, normalize: false });
        assert_eq!(agg.row(1), &[3.0, 2.0]);
    }

    #[test]
    fn average_degree_cases() {
        assert!((path3().average_degree() - 4.0 / 3.0).abs() < 1e-15);
        let mut r = rng::derive(2, &[]);
        let k: Graph<f64> = gen_er(7, 1.0, 2, &mut r).unwrap();
        assert_eq!(k.average_degree(), 6.0);
        let e: Graph<f64> = gen_er(7, 0.0, 2, &mut r).unwrap();
        assert_eq!(e.average_degree(), 0.0);
    }

    #[test]
    fn action_space_shapes_and_determinism() {
        let a: ActionSpace<f64> =
            gen_action_space(GraphKind::Er { p: 0.4 }, 100, 50, 10, &mut rng::derive(9, &[])).unwrap();
        assert_eq!((a.len(), a.n_nodes(), a.feature_dim()), (100, 50, 10));
        let b: ActionSpace<f64> =
            gen_action_space(GraphKind::Er { p: 0.4 }, 100, 50, 10, &mut rng::derive(9, &[])).unwrap();
        assert_eq!(a, b);
        let one: ActionSpace<f64> = gen_action_space(GraphKind::Rdpg, 1, 5, 2, &mut rng::derive(9, &[])).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(
            gen_action_space::<f64, _>(GraphKind::Rdpg, 0, 5, 2, &mut rng::derive(9, &[])),
            Err(GraphError::EmptyActionSpace)
        );
    }

    #[test]
    fn action_space_rejects_mixed_sizes_but_padding_fixes_it() {
        let g2 = Graph::new(&[vec![0, 1], vec![1, 0]], feats(&[vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap();
        let g3 = path3();
        assert!(ActionSpace::new(vec![g2.clone(), g3.clone()]).is_err());
        let space = ActionSpace::padded(vec![g2, g3]).unwrap();
        assert_eq!(space.n_nodes(), 3);
    }

    #[test]
    fn json_round_trip() {
        let g = path3();
        let text = g.to_json();
        assert!(text.contains("\"edges\":[[0,1],[1,2]]"));
        assert_eq!(Graph::<f64>::from_json(&text).unwrap(), g);
    }

    #[test]
    fn permutation_preserves_structure() {
        let g = path3();
        let p = g.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.features().row(0), g.features().row(2));
        assert!(p.has_edge(0, 2)); // old (2,1)
        assert_eq!(p.edge_count(), 2);
    }
}
