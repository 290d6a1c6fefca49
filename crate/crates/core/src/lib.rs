//! Class-name textual inversion on a frozen vision-language recognition
//! model.
//!
//! The engine learns, per class, one or more word embeddings such that the
//! frozen text encoder maps the class query to a feature matching the
//! class's image content, while everything pretrained stays bitwise intact.
//! On top of that sit the four adaptation protocols (adapt, adjust,
//! open-vocabulary, sequential), the region-scoring mode, and the
//! interpretability analysis.
//!
//! Batch-parallel paths (query encoding, evaluation fan-out, per-seed runs,
//! finite-difference sweeps) run on rayon under the default `parallel`
//! feature and fall back to sequential execution without it; outputs are
//! bitwise identical either way.

pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod interpret;
pub mod par;
pub mod scalar;
pub mod store;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
