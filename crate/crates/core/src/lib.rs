//! Item indexing with residual-quantized semantic codes and a generative
//! recommender that decodes those codes under trie constraints.

pub mod corpus;
pub mod embed;
pub mod error;
pub mod indexstore;
pub mod instruct;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod recgen;
pub mod rqvae;
pub mod usm;
pub mod util;

pub use error::{Error, Result};
