//! Cross-source log anomaly detection.
//!
//! Raw logs from heterogeneous sources flow through a fixed pipeline:
//!
//! 1. [`ingest`] reads per-source log files, strips headers and splits each
//!    source into stratified train/test partitions.
//! 2. [`template_miner`] groups messages into templates with a Drain-style
//!    fixed-depth prefix tree and emits 80 structural features per record.
//! 3. [`label_transfer`] moves anomaly labels from labeled templates to
//!    unlabeled ones by combined semantic and fuzzy matching.
//! 4. [`embedding`] produces semantic vectors and assembles the full
//!    `dim + 80` feature vector.
//! 5. [`feature_select`] fuses mutual-information and random-forest rankings
//!    to keep the top `K` features.
//! 6. [`balance`] oversamples the minority class with SMOTE.
//! 7. [`neural_core`] and [`meta_learner`] meta-train a prototypical encoder
//!    with first-order MAML over a three-phase episode curriculum.
//! 8. [`eval_harness`] drives leave-one-source-out evaluation and reports.

pub mod balance;
pub mod config;
pub mod embedding;
pub mod error;
pub mod eval_harness;
pub mod feature_select;
pub mod hashing;
pub mod ingest;
pub mod label_transfer;
pub mod meta_learner;
pub mod neural_core;
pub mod pipeline;
pub mod synth;
pub mod template_miner;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use ingest::{Label, LogRecord, RecordSet};
pub use template_miner::{LogTemplate, TemplateMiner, Token};
