//! Label prototypes for extreme multi-label retrieval.
//!
//! Queries and labels share a light text encoder. Each label additionally
//! gets a prototype built by a small transformer block that fuses its text
//! embedding, a running centroid of its positive queries and a shared free
//! vector. Training uses a clipped dynamic-margin triplet loss plus a
//! regularizer tying prototypes to label embeddings. Inference scores a query
//! against all prototypes with exact maximum inner product search.

pub mod cli;
pub mod cluster;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod inference;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod prototype;
pub mod retrieval;
pub mod sampling;
pub mod seeding;
pub mod synthetic;
pub mod trainer;

pub use corpus::{Corpus, PropensityTable, Record};
pub use error::{Error, Result};
pub use inference::ScoreMode;
pub use losses::{MarginConfig, MarginMode};
pub use metrics::EvalResult;
pub use model::Model;
pub use retrieval::{Hit, PrototypeIndex};
pub use trainer::{train, TrainConfig};
