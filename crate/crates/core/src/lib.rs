//! Grouped-attention CPU performance prediction.
//!
//! The pipeline runs from raw per-benchmark CSV rows to trained models:
//! [`ingest`] cleans and consolidates runs into multi-output records,
//! [`encode`] fits normalization and tokenization on the training split,
//! [`model`] holds the attention network built on the [`tensor`] autodiff
//! engine, [`training`] runs splits, folds and the optimization loop, and
//! [`evaluation`], [`baselines`] and [`explain`] produce reports.
//! [`synth`] generates planted datasets for verification.

pub mod baselines;
pub mod encode;
pub mod evaluation;
pub mod explain;
pub mod ingest;
pub mod model;
pub mod schema;
pub mod synth;
pub mod tensor;
pub mod training;
