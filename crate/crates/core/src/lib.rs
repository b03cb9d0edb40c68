//! Soft-shape time series classification: shape embedding, attention-based
//! soft sparsification, mixture-of-experts and shared-expert learning
//! blocks, and conjunctive pooling, trained with hand-written gradients.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod embedding;
pub mod error;
pub mod export;
pub mod inter;
pub mod model;
pub mod moe;
pub mod norm;
pub mod params;
pub mod report;
pub mod scalar;
pub mod sparsify;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, SoftShape, SoftShape32, SoftShape64};
pub use scalar::Scalar;
pub use train::{ModelState, TrainConfig};

pub type ModelState32 = ModelState<f32>;
pub type ModelState64 = ModelState<f64>;
