//! RCNet: point-cloud classification and segmentation by partitioning space
//! into parallel beams, encoding each beam's depth-sorted points with a
//! shared GRU, and aggregating the resulting 2D feature map with a CNN.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the bottom of this file name the two concrete instantiations.

pub mod dataio;
pub mod encoder;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod partition;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tensor::{Graph, Mode, ParamId, ParamStore, Tensor, Var};

/// Batch-norm variance floor.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in the batch-norm moving average.
pub const BN_MOMENTUM: f64 = 0.9;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type RcNet32 = model::RcNet<f32>;
pub type RcNet64 = model::RcNet<f64>;
pub type PointCloud32 = dataio::PointCloud<f32>;
pub type PointCloud64 = dataio::PointCloud<f64>;
pub type Dataset32 = dataio::Dataset<f32>;
pub type Dataset64 = dataio::Dataset<f64>;
pub type Ensemble32 = ensemble::Ensemble<f32>;
pub type Ensemble64 = ensemble::Ensemble<f64>;
