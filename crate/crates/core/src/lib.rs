//! Dual knowledge-bank disease screening.
//!
//! Patch-level feature maps are pooled into a normal and a pathological
//! knowledge bank by greedy coreset selection. Cases are then screened either
//! training-free, by contrasting k-NN distance maps against both banks, or by
//! a small attention head that reasons over the retrieved evidence.

pub mod benchmark;
pub mod contrastive;
pub mod error;
pub mod feature_store;
pub mod knowledge_bank;
pub mod metrics;
pub mod reasoning;
pub mod util;

pub use error::{Error, Result};
