//! Run configuration: one TOML document per experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use oryx_core::block::MixerPair;
use oryx_core::infer::{Split, DEFAULT_SMOOTHING};
use oryx_core::model::ModelConfig;
use oryx_core::train::TrainConfig;
use oryx_core::{Error, Precision, Result};

use crate::data::SyntheticTask;

fn d_eval_sequences() -> usize {
    64
}
fn d_eval_offset() -> u64 {
    1_000_000
}
fn d_window() -> usize {
    DEFAULT_SMOOTHING
}
fn d_needle() -> SyntheticTask {
    SyntheticTask::needle(128, 24, 2)
}
fn d_needle_items() -> usize {
    200
}
fn d_split() -> Split {
    Split::Task
}
fn d_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}
fn d_run_id() -> String {
    "run".into()
}

/// Held-out evaluation: switch curves and the retrieval protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    /// Number of held-out MQAR sequences scored for NLL curves.
    #[serde(default = "d_eval_sequences")]
    pub sequences: usize,
    /// Index of the first held-out sequence; training reads indices below it.
    #[serde(default = "d_eval_offset")]
    pub offset: u64,
    /// Switch positions for the curve experiment; empty means half the
    /// sequence length.
    #[serde(default)]
    pub switch_points: Vec<usize>,
    #[serde(default = "d_window")]
    pub smoothing_window: usize,
    #[serde(default = "d_needle")]
    pub needle: SyntheticTask,
    #[serde(default = "d_needle_items")]
    pub needle_items: usize,
    #[serde(default = "d_split")]
    pub split: Split,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            sequences: d_eval_sequences(),
            offset: d_eval_offset(),
            switch_points: Vec::new(),
            smoothing_window: d_window(),
            needle: d_needle(),
            needle_items: d_needle_items(),
            split: d_split(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "d_out_dir")]
    pub dir: PathBuf,
    /// Extra checkpoint every this many steps; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Record wall-clock seconds in metrics. Off keeps metrics reproducible.
    #[serde(default)]
    pub wall_time: bool,
    #[serde(default = "d_run_id")]
    pub run_id: String,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { dir: d_out_dir(), checkpoint_every: 0, wall_time: false, run_id: d_run_id() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds parameter init, mode sampling and the training data stream.
    #[serde(default)]
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SyntheticTask,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

impl RunConfig {
    /// The MQAR setup used for the desk-scale training run.
    pub fn mqar_default() -> Self {
        let mut train = TrainConfig::new(3000, 3e-3, 8);
        train.min_lr = 3e-4;
        Self {
            seed: 0,
            model: ModelConfig::small(MixerPair::Tm),
            train,
            data: SyntheticTask::mqar(128, 8, 1),
            eval: EvalSpec::default(),
            output: OutputSpec::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> std::result::Result<Self, LoadError> {
        let text = std::fs::read_to_string(path).map_err(|e| LoadError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| LoadError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        self.eval.needle.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.data.vocab > self.model.vocab_size || self.eval.needle.vocab > self.model.vocab_size {
            return bad(format!("task vocabulary exceeds model vocabulary {}", self.model.vocab_size));
        }
        if self.eval.sequences == 0 || self.eval.needle_items == 0 {
            return bad("evaluation sets must be non-empty".into());
        }
        let needed = self.train.steps.saturating_mul(self.train.batch_size as u64);
        if needed > self.eval.offset {
            return bad(format!("{needed} training sequences overlap held-out indices from {}", self.eval.offset));
        }
        if self.eval.switch_points.iter().any(|&s| s == 0 || s >= self.data.seq_len) {
            return bad(format!("switch points must lie in 1..{}", self.data.seq_len));
        }
        if let Split::Fraction(f) = self.eval.split {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("split fraction {f} outside [0, 1]"));
            }
        }
        if self.output.run_id.is_empty() {
            return bad("run_id must be non-empty".into());
        }
        Ok(())
    }

    pub fn switch_points(&self) -> Vec<usize> {
        if self.eval.switch_points.is_empty() {
            vec![self.data.seq_len / 2]
        } else {
            self.eval.switch_points.clone()
        }
    }

    pub fn with_precision(mut self, p: Precision) -> Self {
        self.model.precision = p;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Digest of the model architecture; checkpoints carry it so parameters
/// are never loaded into a mismatched model.
pub fn model_digest(model: &ModelConfig) -> [u8; 32] {
    let canon = serde_json::to_vec(model).expect("model config serializes");
    Sha256::digest(&canon).into()
}

#[derive(Debug)]
pub enum LoadError {
    Io(String),
    Config(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let cfg = RunConfig::mqar_default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = RunConfig::mqar_default().to_toml().unwrap();
        let extra = text.replace("[model]\n", "[model]\nwidth = 3\n");
        assert_ne!(extra, text);
        assert!(RunConfig::from_toml(&extra).is_err());
        assert!(RunConfig::from_toml(&format!("bogus = 1\n{text}")).is_err());
    }

    #[test]
    fn minimal_document_fills_defaults() {
        let text = r#"
            [model]
            vocab_size = 64
            d_model = 32
            n_layers = 2
            d_head = 8
            chunk = 8

            [train]
            steps = 10
            peak_lr = 0.001
            min_lr = 0.0001
            batch_size = 2

            [data]
            kind = "mqar"
        "#;
        let cfg = RunConfig::from_toml(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.eval, EvalSpec::default());
        assert!(!cfg.output.wall_time);
        assert_eq!(cfg.switch_points(), vec![64]);
    }

    #[test]
    fn overlapping_eval_indices_are_invalid() {
        let mut cfg = RunConfig::mqar_default();
        cfg.eval.offset = 100;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn digest_tracks_architecture() {
        let a = RunConfig::mqar_default();
        let mut b = a.clone();
        assert_eq!(model_digest(&a.model), model_digest(&b.model));
        b.model.n_layers += 1;
        assert_ne!(model_digest(&a.model), model_digest(&b.model));
    }
}
