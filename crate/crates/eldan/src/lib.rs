//! Encounter-level document attention networks.
//!
//! An *encounter* is a small bag of sparse documents that shares one label set.
//! This crate trains one binary classifier per code: each document is embedded
//! and encoded independently, the documents are pooled into a single encounter
//! vector — either uniformly (`eldn` mode) or through learned attention
//! (`eldan` mode) — and a softmax layer scores the encounter. The attention
//! weights double as a document ranking, which is how the evaluation module
//! recovers which documents inside a positive encounter actually carry the
//! code.
//!
//! The numeric core is deliberately hand-rolled (dense `f64` matrices, manual
//! reverse-mode gradients) so that training is bitwise reproducible from a
//! seed on any platform. `autodiff::grad_check` keeps the hand-written
//! gradients honest against central finite differences.

pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod eval;
pub mod hashing;
pub mod linalg;
pub mod model;
pub mod synthgen;
pub mod train;
