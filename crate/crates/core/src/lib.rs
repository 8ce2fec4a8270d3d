//! Unsupervised anomaly detection for multivariate time series.
//!
//! Windows of `K` entities are scored by an entity-aware conditional
//! normalizing flow. The flow's condition comes from an LSTM encoding of
//! each entity, mixed across entities through a per-window dependency
//! graph learned by self-attention. Everything is trained jointly by
//! maximum likelihood on unlabeled data; windows with low likelihood are
//! flagged, and per-entity scores attribute the anomaly.

pub mod adam;
pub mod attention;
pub mod checkpoint;
pub mod condition;
pub mod data;
pub mod detector;
pub mod error;
pub mod flow;
pub mod graph;
pub mod model;
pub mod synth;
pub mod temporal;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::FlowModel;
pub use tensor::Tensor;
