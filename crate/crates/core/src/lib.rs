//! Pooling as iterative cross-attention: a generic engine, the classical and
//! attention-based poolers expressed in it, and SimPool with its gradients.

pub mod attnmap;
pub mod cluster_poolers;
pub mod error;
pub mod framework;
pub mod gradcheck;
pub mod layers;
pub mod matcore;
pub mod meanfam;
pub mod methods;
pub mod reweight_poolers;
pub mod rng;
pub mod simple_poolers;
pub mod simpool;
pub mod tensor_io;
pub mod tournament;
pub mod transformer_poolers;

pub use error::{Error, ErrorClass, Result};
pub use framework::{run_pooling, AttentionMatrix, FeatureMap, PooledSet, PoolingSpec};
pub use matcore::Mat;
pub use methods::Method;
