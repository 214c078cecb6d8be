//! Experiment harness for the shared attention / linear block: synthetic
//! recall data, training runs, mode-switch curves, cross-mode retrieval and
//! FLOPs tables, plus the checkpoint and metrics formats they write.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod metrics;
