//! Two-stage biomedical entity normalization: Jaccard candidate retrieval
//! followed by a knowledge-injected prompt classifier over a masked
//! language model.

pub mod autodiff;
pub mod candidate;
pub mod corpus;
pub mod error;
pub mod harness;
pub mod kb;
pub mod knowledge_encoder;
pub mod mlm;
pub mod optim;
pub mod prompt;
pub mod tensor;

pub use error::{Error, Result};
