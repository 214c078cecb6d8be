//! Per-chunk mixer assignments.

use serde::{Deserialize, Serialize};

use crate::block::MixerMode;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Mixer assignment for a sequence split into `chunk`-sized pieces. The
/// final chunk may be shorter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeSchedule {
    chunk: usize,
    len: usize,
    modes: Vec<MixerMode>,
}

pub fn chunk_count(len: usize, chunk: usize) -> usize {
    len.div_ceil(chunk)
}

impl ModeSchedule {
    pub fn from_chunks(len: usize, chunk: usize, modes: Vec<MixerMode>) -> Result<Self> {
        if chunk == 0 {
            return Err(Error::InvalidConfig("chunk size must be at least 1".into()));
        }
        if modes.len() != chunk_count(len, chunk) {
            return Err(Error::ScheduleMismatch { schedule: modes.len() * chunk, sequence: len });
        }
        Ok(Self { chunk, len, modes })
    }

    /// Every chunk uses `mode`.
    pub fn uniform(len: usize, chunk: usize, mode: MixerMode) -> Self {
        let chunk = chunk.max(1);
        Self { chunk, len, modes: vec![mode; chunk_count(len, chunk)] }
    }

    pub fn chunk(&self) -> usize {
        self.chunk
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn chunk_modes(&self) -> &[MixerMode] {
        &self.modes
    }

    pub fn mode_at(&self, pos: usize) -> MixerMode {
        self.modes[pos / self.chunk]
    }

    pub fn per_position(&self) -> Vec<MixerMode> {
        (0..self.len).map(|t| self.mode_at(t)).collect()
    }

    pub fn attention_chunks(&self) -> usize {
        self.modes.iter().filter(|m| **m == MixerMode::Attention).count()
    }

    /// Fails unless the schedule covers exactly `len` positions.
    pub fn check_covers(&self, len: usize) -> Result<()> {
        if self.len != len {
            return Err(Error::ScheduleMismatch { schedule: self.len, sequence: len });
        }
        Ok(())
    }
}

/// Each chunk independently attention with probability `p`.
pub fn sample_mode_schedule(len: usize, chunk: usize, p: f64, rng: &mut SeededRng) -> Result<ModeSchedule> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidConfig(format!("attention probability {p} must lie in (0, 1)")));
    }
    if chunk == 0 {
        return Err(Error::InvalidConfig("chunk size must be at least 1".into()));
    }
    let modes = (0..chunk_count(len, chunk))
        .map(|_| if rng.bernoulli(p) { MixerMode::Attention } else { MixerMode::Linear })
        .collect();
    ModeSchedule::from_chunks(len, chunk, modes)
}
