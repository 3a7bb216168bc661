//! Graph-action bandits with graph neural network reward models.
//!
//! The core is generic over the floating-point type (`f32` or `f64`); the
//! aliases at the crate root fix it to `f64`, which is what the experiment
//! harness uses.

pub mod env;
pub mod gnn;
pub mod graph;
pub mod harness;
pub mod linalg;
pub mod policy;
pub mod rng;
pub mod scalar;
pub mod tangent;
pub mod train;

pub use harness::HarnessError;
pub use scalar::Scalar;

pub type Matrix = linalg::Matrix<f64>;
pub type Graph = graph::Graph<f64>;
pub type ActionSpace = graph::ActionSpace<f64>;
pub type AggregatedFeatures = graph::AggregatedFeatures<f64>;
pub type GnnParams = gnn::GnnParams<f64>;
pub type TangentFeature = tangent::TangentFeature<f64>;
pub type KernelMatrix = tangent::KernelMatrix<f64>;
pub type UncertaintyState = policy::UncertaintyState<f64>;
