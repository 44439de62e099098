//! kNN-augmented greedy decoding over a toy cipher-translation task, with a
//! learned classifier that decides per step whether retrieval is worth running.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ar;
pub(crate) mod binio;
pub mod classifier;
pub mod corpus;
pub mod datastore;
pub mod engine;
pub mod error;
pub mod eval;
pub mod knn;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod pipeline;

pub use error::{Error, Result};
