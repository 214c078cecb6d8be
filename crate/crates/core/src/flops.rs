//! Closed-form FLOP counts of the sequence-mixing work, excluding weight
//! projections, gates and norms.
//!
//! Products are counted as `2 m n k`. For the linear mixer the counts
//! follow the chunked scan used in [`crate::mixers`] for the scalar-decay
//! rule; the delta rule adds triangular solves and state corrections that
//! this model does not include.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub chunk_state: u64,
    pub state_passing: u64,
    pub intra_chunk: u64,
    pub inter_chunk: u64,
    pub attention_output: u64,
    pub total: u64,
}

impl CostBreakdown {
    fn new(chunk_state: u64, state_passing: u64, intra_chunk: u64, inter_chunk: u64, attention_output: u64) -> Self {
        Self {
            chunk_state,
            state_passing,
            intra_chunk,
            inter_chunk,
            attention_output,
            total: chunk_state + state_passing + intra_chunk + inter_chunk + attention_output,
        }
    }
}

fn positive(name: &str, x: usize) -> Result<u64> {
    if x == 0 {
        return Err(Error::InvalidConfig(format!("{name} must be positive")));
    }
    Ok(x as u64)
}

/// `T(T+1)(D_k + D_v)`: causal scores and weighted values.
pub fn attention_flops(t: usize, d_k: usize, d_v: usize) -> Result<u64> {
    let (t, dk, dv) = (positive("T", t)?, positive("D_k", d_k)?, positive("D_v", d_v)?);
    Ok(t * (t + 1) * (dk + dv))
}

/// Attention cost of the positions `rows`, each attending its causal prefix.
fn attention_rows(rows: std::ops::Range<u64>, dk: u64, dv: u64) -> u64 {
    rows.map(|i| 2 * (i + 1) * (dk + dv)).sum()
}

/// Sum over chunks of `2 len^2 (D_k + D_v)`; equals `2 T C (D_k + D_v)`
/// when `C` divides `T`.
fn intra(t: u64, c: u64, dk: u64, dv: u64) -> u64 {
    let full = t / c;
    let rem = t % c;
    2 * (dk + dv) * (full * c * c + rem * rem)
}

/// Chunked linear recurrence. With a ragged last chunk, state passing is
/// charged once per chunk (`ceil(T/C)`) and the intra-chunk term uses the
/// actual chunk lengths.
pub fn linear_flops(t: usize, c: usize, d_k: usize, d_v: usize) -> Result<CostBreakdown> {
    let (t, c, dk, dv) = (positive("T", t)?, positive("C", c)?, positive("D_k", d_k)?, positive("D_v", d_v)?);
    Ok(CostBreakdown::new(2 * t * dk * dv, 2 * t.div_ceil(c) * dk * dv, intra(t, c, dk, dv), 2 * t * dk * dv, 0))
}

fn check_delta(delta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::InvalidConfig(format!("delta must lie in [0, 1], got {delta}")));
    }
    Ok(())
}

/// Expected cost when each chunk reads out through the linear mixer with
/// probability `delta`: the state update always runs, the linear readout
/// scales with `delta` and the attention readout with `1 - delta`.
pub fn oryx_flops(t: usize, c: usize, d_k: usize, d_v: usize, delta: f64) -> Result<CostBreakdown> {
    check_delta(delta)?;
    let lin = linear_flops(t, c, d_k, d_v)?;
    let attn = attention_flops(t, d_k, d_v)?;
    let scale = |x: u64, f: f64| (x as f64 * f).round() as u64;
    Ok(CostBreakdown::new(
        lin.chunk_state,
        lin.state_passing,
        scale(lin.intra_chunk, delta),
        scale(lin.inter_chunk, delta),
        scale(attn, 1.0 - delta),
    ))
}

/// Exact cost of one schedule; `linear_chunks[j]` marks chunk `j` as
/// reading out through the linear mixer.
pub fn oryx_flops_for_schedule(
    t: usize,
    c: usize,
    d_k: usize,
    d_v: usize,
    linear_chunks: &[bool],
) -> Result<CostBreakdown> {
    let lin = linear_flops(t, c, d_k, d_v)?;
    if linear_chunks.len() != t.div_ceil(c) {
        return Err(Error::ScheduleMismatch { schedule: linear_chunks.len() * c, sequence: t });
    }
    let (t, c, dk, dv) = (t as u64, c as u64, d_k as u64, d_v as u64);
    let (mut intra_sum, mut inter_sum, mut attn) = (0, 0, 0);
    for (j, &is_lin) in linear_chunks.iter().enumerate() {
        let start = j as u64 * c;
        let len = c.min(t - start);
        if is_lin {
            intra_sum += 2 * len * len * (dk + dv);
            inter_sum += 2 * len * dk * dv;
        } else {
            attn += attention_rows(start..start + len, dk, dv);
        }
    }
    Ok(CostBreakdown::new(lin.chunk_state, lin.state_passing, intra_sum, inter_sum, attn))
}

/// Leading-order attention cost with `C = D_k = D_v`: `2 T^2 C`.
pub fn simplified_attention_flops(t: f64, c: f64) -> f64 {
    2.0 * t * t * c
}

/// Leading-order mixed cost with `C = D_k = D_v`:
/// `2 T C^2 (1 + 3 delta) + 2 (1 - delta) T^2 C`.
pub fn simplified_oryx_flops(t: f64, c: f64, delta: f64) -> f64 {
    2.0 * t * c * c * (1.0 + 3.0 * delta) + 2.0 * (1.0 - delta) * t * t * c
}

fn beats_attention(t: u64, c: usize, delta: f64) -> bool {
    // simplified_oryx < simplified_attention  <=>  delta T > C (1 + 3 delta)
    delta * t as f64 > c as f64 * (1.0 + 3.0 * delta)
}

/// Smallest integer `T` with `T > (1/delta + 3) C`.
pub fn crossover_length(c: usize, delta: f64) -> Result<u64> {
    positive("C", c)?;
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidConfig(format!("delta must lie in (0, 1], got {delta}")));
    }
    let mut t = (c as f64 * (1.0 / delta + 3.0)).floor() as u64 + 1;
    while t > 1 && beats_attention(t - 1, c, delta) {
        t -= 1;
    }
    while !beats_attention(t, c, delta) {
        t += 1;
    }
    Ok(t)
}
