//! Superbloom: multi-hash vocabulary compression for large-vocabulary
//! prediction models.
//!
//! Each entity id is mapped to `m` hash tokens in a much smaller token space
//! (a Bloom digest). A multi-layer transformer is trained with a full softmax
//! over the hashed space on a masked-prediction task, and top-k predictions
//! over the original vocabulary are recovered by a beam search that can
//! certify when its result is exactly the global optimum.
//!
//! Modules:
//!
//! - [`hashing`]: random and coherent hash scheme construction, inverse
//!   lookup tables, scheme files.
//! - [`corpus`]: corpus ingestion, segment cutting, masked-example
//!   generation, the synthetic corpus generator, and example caches.
//! - [`transformer`]: the model, forward pass, loss, and analytic gradients.
//! - [`training`]: Adam, the learning-rate schedule, the training loop, and
//!   checkpointing.
//! - [`inference`]: score functions, the exhaustive ranking oracle, and
//!   certificate-bearing beam search.
//! - [`evaluation`]: recall metrics, frequency-bucket recall, and experiment
//!   harnesses (beam-width sweep, depth study, hashing comparison).

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod hashing;
pub mod inference;
pub mod training;
pub mod transformer;
pub mod util;

pub use error::{Error, Result};
pub use hashing::{HashScheme, VocabSpec};
