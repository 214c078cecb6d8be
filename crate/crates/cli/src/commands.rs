//! Subcommand implementations. Every command validates its configuration
//! before touching the filesystem.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use oryx_core::block::MixerMode;
use oryx_core::flops::{attention_flops, crossover_length, linear_flops, oryx_flops};
use oryx_core::infer::{cross_mode_retrieval_eval, forward_with_plan, nll_by_position, ModePlan, NllCurve};
use oryx_core::model::{init_params, ModelConfig, ModelParams};
use oryx_core::train::{train_step, Example, OptimizerState, StepStats};
use oryx_core::{Precision, Real, SeededRng, Tensor};

use crate::checkpoint::{self, load_checkpoint, save_checkpoint, CheckpointError};
use crate::config::{model_digest, LoadError, RunConfig};
use crate::data::{generate_mqar, generate_needle, MqarSequence, TaskKind};
use crate::metrics::MetricsWriter;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<oryx_core::Error> for CliError {
    fn from(e: oryx_core::Error) -> Self {
        use oryx_core::Error as E;
        match e {
            E::InvalidConfig(_) | E::TokenOutOfRange { .. } | E::ScheduleMismatch { .. } | E::PlanTooShort { .. } => {
                CliError::Config(e.to_string())
            }
            E::NonFinite(_) | E::SingularSolve(_) | E::DegenerateRow { .. } | E::DegenerateKey { .. } => {
                CliError::Numeric(e.to_string())
            }
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } | CheckpointError::Format(_) => CliError::Io(e.to_string()),
            CheckpointError::DigestMismatch | CheckpointError::PrecisionMismatch { .. } => {
                CliError::Config(e.to_string())
            }
        }
    }
}

impl From<LoadError> for CliError {
    fn from(e: LoadError) -> Self {
        match e {
            LoadError::Io(m) => CliError::Io(m),
            LoadError::Config(m) => CliError::Config(m),
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";

fn prepare_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(io(dir))
}

fn fresh_file(path: &Path) -> CliResult<()> {
    match std::fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(io(path)(e)),
    }
}

/// Held-out MQAR sequences.
pub fn eval_sequences(cfg: &RunConfig) -> CliResult<Vec<MqarSequence>> {
    Ok(generate_mqar(&cfg.data, cfg.eval.offset, cfg.eval.sequences)?)
}

/// Fraction of query answers predicted exactly under a single mode.
pub fn mqar_accuracy<F: Real>(
    params: &ModelParams<Tensor<F>>,
    model: &ModelConfig,
    seqs: &[MqarSequence],
    mode: MixerMode,
) -> CliResult<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in seqs {
        let logits = forward_with_plan(&s.tokens, &ModePlan::uniform(s.tokens.len(), mode), params, model)?;
        for &(pos, ans) in &s.answers {
            let row = logits.row(pos);
            let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            hit += usize::from(best == ans);
            total += 1;
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub stats: Vec<StepStats>,
    pub accuracy_attention: f64,
    pub accuracy_linear: f64,
}

pub fn run_train(cfg: &RunConfig) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    if cfg.data.kind != TaskKind::Mqar {
        return Err(CliError::Config("training runs on the mqar task".into()));
    }
    let dir = &cfg.output.dir;
    prepare_dir(dir)?;
    let text = cfg.to_toml()?;
    let cfg_path = dir.join("config.toml");
    std::fs::write(&cfg_path, text).map_err(io(&cfg_path))?;
    match cfg.model.precision {
        Precision::F32 => train_typed::<f32>(cfg),
        Precision::F64 => train_typed::<f64>(cfg),
    }
}

fn train_typed<F: Real>(cfg: &RunConfig) -> CliResult<TrainOutcome> {
    let dir = &cfg.output.dir;
    let root = SeededRng::new(cfg.seed);
    let mut params = init_params::<F>(&cfg.model, &mut root.fork(0))?;
    let mut rng = root.fork(1);
    let digest = model_digest(&cfg.model);

    let metrics_path = dir.join(METRICS_FILE);
    fresh_file(&metrics_path)?;
    let mut metrics =
        MetricsWriter::open(&metrics_path, &cfg.output.run_id, cfg.output.wall_time).map_err(io(&metrics_path))?;

    let task = cfg.data.clone();
    let bs = cfg.train.batch_size;
    let next_batch = |step: u64| -> oryx_core::Result<Vec<Example>> {
        Ok(generate_mqar(&task, step * bs as u64, bs)?.iter().map(|s| s.example()).collect())
    };

    let every = cfg.output.checkpoint_every;
    let mut opt = OptimizerState::for_model(&params);
    let mut stats = Vec::with_capacity(cfg.train.steps as usize);
    for step in 0..cfg.train.steps {
        let batch = next_batch(step)?;
        let s = train_step(&batch, &mut params, &mut opt, &cfg.model, &cfg.train, step, &mut rng)?;
        for (name, v) in [("loss", s.loss), ("lr", s.lr), ("grad_norm", s.grad_norm), ("attention_fraction", s.attention_fraction)] {
            metrics.step(step, name, v).map_err(io(&metrics_path))?;
        }
        if step % 100 == 0 || step + 1 == cfg.train.steps {
            eprintln!("step {step:>5}  loss {:.4}  lr {:.2e}  |g| {:.3}", s.loss, s.lr, s.grad_norm);
        }
        stats.push(s);
        let done = step + 1;
        if every > 0 && done % every == 0 && done < cfg.train.steps {
            save_checkpoint(&dir.join(format!("checkpoint-{done:06}.bin")), &params, digest, done)?;
        }
    }
    let checkpoint = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&checkpoint, &params, digest, cfg.train.steps)?;

    let held = eval_sequences(cfg)?;
    let accuracy_attention = mqar_accuracy(&params, &cfg.model, &held, MixerMode::Attention)?;
    let accuracy_linear = mqar_accuracy(&params, &cfg.model, &held, MixerMode::Linear)?;
    metrics.scalar("eval_accuracy_attention", accuracy_attention).map_err(io(&metrics_path))?;
    metrics.scalar("eval_accuracy_linear", accuracy_linear).map_err(io(&metrics_path))?;
    metrics.flush().map_err(io(&metrics_path))?;
    eprintln!("held-out accuracy: attention {accuracy_attention:.4}  linear {accuracy_linear:.4}");
    Ok(TrainOutcome { checkpoint, metrics: metrics_path, stats, accuracy_attention, accuracy_linear })
}

/// Loads parameters for `cfg.model` from a checkpoint.
pub fn load_params<F: Real>(cfg: &RunConfig, path: &Path) -> CliResult<ModelParams<Tensor<F>>> {
    if cfg.model.precision != F::PRECISION {
        return Err(CliError::Config(format!("model precision is {}", cfg.model.precision)));
    }
    let mut params = init_params::<F>(&cfg.model, &mut SeededRng::new(0))?;
    load_checkpoint(path, &mut params, model_digest(&cfg.model))?;
    Ok(params)
}

#[derive(Clone, Debug)]
pub struct NamedCurve {
    pub name: String,
    pub plan: ModePlan,
    pub curve: NllCurve,
}

/// The plans compared by the switch-curve experiment: both single-mode
/// baselines, then A->L and L->A at every switch point.
pub fn switch_plans(len: usize, switch_points: &[usize]) -> CliResult<Vec<(String, ModePlan)>> {
    let mut plans = vec![
        ("all_attention".to_string(), ModePlan::uniform(len, MixerMode::Attention)),
        ("all_linear".to_string(), ModePlan::uniform(len, MixerMode::Linear)),
    ];
    for &s in switch_points {
        plans.push((format!("attention_to_linear@{s}"), ModePlan::from_switches(len, MixerMode::Attention, &[s])?));
        plans.push((format!("linear_to_attention@{s}"), ModePlan::from_switches(len, MixerMode::Linear, &[s])?));
    }
    Ok(plans)
}

pub fn switch_curves<F: Real>(cfg: &RunConfig, params: &ModelParams<Tensor<F>>) -> CliResult<Vec<NamedCurve>> {
    let held: Vec<Example> = eval_sequences(cfg)?.iter().map(|s| s.example()).collect();
    let mut out = Vec::new();
    for (name, plan) in switch_plans(cfg.data.seq_len, &cfg.switch_points())? {
        eprintln!("scoring {name}");
        let curve = nll_by_position(params, &cfg.model, &held, &plan, cfg.eval.smoothing_window)?;
        out.push(NamedCurve { name, plan, curve });
    }
    Ok(out)
}

pub fn run_switch_curve(cfg: &RunConfig, checkpoint_path: &Path) -> CliResult<Vec<NamedCurve>> {
    cfg.validate()?;
    let curves = match cfg.model.precision {
        Precision::F32 => switch_curves(cfg, &load_params::<f32>(cfg, checkpoint_path)?)?,
        Precision::F64 => switch_curves(cfg, &load_params::<f64>(cfg, checkpoint_path)?)?,
    };
    let dir = &cfg.output.dir;
    prepare_dir(dir)?;
    let path = dir.join("switch_curves.jsonl");
    fresh_file(&path)?;
    let mut w = MetricsWriter::open(&path, &cfg.output.run_id, cfg.output.wall_time).map_err(io(&path))?;
    for c in &curves {
        for (pos, (raw, smooth)) in c.curve.raw.iter().zip(&c.curve.smoothed).enumerate() {
            if let Some(v) = raw {
                w.position(pos, &format!("nll/{}", c.name), *v).map_err(io(&path))?;
            }
            if let Some(v) = smooth {
                w.position(pos, &format!("nll_smoothed/{}", c.name), *v).map_err(io(&path))?;
            }
        }
    }
    w.flush().map_err(io(&path))?;
    Ok(curves)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalRow {
    pub context_mode: MixerMode,
    pub prompt_mode: MixerMode,
    pub accuracy: f64,
}

pub fn retrieval_table<F: Real>(cfg: &RunConfig, params: &ModelParams<Tensor<F>>) -> CliResult<Vec<RetrievalRow>> {
    let items = generate_needle(&cfg.eval.needle, 0, cfg.eval.needle_items)?;
    let tasks: Vec<_> = items.iter().map(|i| i.task()).collect();
    let mut rows = Vec::new();
    for context_mode in [MixerMode::Attention, MixerMode::Linear] {
        for prompt_mode in [MixerMode::Attention, MixerMode::Linear] {
            let accuracy =
                cross_mode_retrieval_eval(params, &cfg.model, &tasks, context_mode, prompt_mode, cfg.eval.split)?;
            eprintln!("context {context_mode:?} prompt {prompt_mode:?}: {accuracy:.3}");
            rows.push(RetrievalRow { context_mode, prompt_mode, accuracy });
        }
    }
    Ok(rows)
}

pub fn format_retrieval(rows: &[RetrievalRow]) -> String {
    let mut s = String::from("context\tprompt\taccuracy\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{}\t{:.4}", mode_name(r.context_mode), mode_name(r.prompt_mode), r.accuracy);
    }
    s
}

pub fn mode_name(m: MixerMode) -> &'static str {
    match m {
        MixerMode::Attention => "attention",
        MixerMode::Linear => "linear",
    }
}

pub fn run_retrieval_eval(cfg: &RunConfig, checkpoint_path: &Path) -> CliResult<Vec<RetrievalRow>> {
    cfg.validate()?;
    let rows = match cfg.model.precision {
        Precision::F32 => retrieval_table(cfg, &load_params::<f32>(cfg, checkpoint_path)?)?,
        Precision::F64 => retrieval_table(cfg, &load_params::<f64>(cfg, checkpoint_path)?)?,
    };
    prepare_dir(&cfg.output.dir)?;
    let path = cfg.output.dir.join("retrieval.tsv");
    std::fs::write(&path, format_retrieval(&rows)).map_err(io(&path))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopsGrid {
    pub lengths: Vec<usize>,
    pub chunks: Vec<usize>,
    pub deltas: Vec<f64>,
}

impl Default for FlopsGrid {
    fn default() -> Self {
        Self { lengths: vec![256, 1024, 2048, 8192], chunks: vec![16, 64, 128], deltas: vec![0.25, 0.5, 0.75, 1.0] }
    }
}

/// Plain-text cost table with `C = D_k = D_v`.
pub fn flops_table(grid: &FlopsGrid) -> CliResult<String> {
    if grid.lengths.is_empty() || grid.chunks.is_empty() || grid.deltas.is_empty() {
        return Err(CliError::Config("flops grid needs lengths, chunks and deltas".into()));
    }
    if let Some(d) = grid.deltas.iter().find(|d| !(**d > 0.0 && **d <= 1.0)) {
        return Err(CliError::Config(format!("delta {d} outside (0, 1]")));
    }
    let mut s = String::from("T\tC\tdelta\tattention\tlinear\toryx\toryx/attention\tcrossover\n");
    for &c in &grid.chunks {
        for &t in &grid.lengths {
            let attn = attention_flops(t, c, c)?;
            let lin = linear_flops(t, c, c, c)?.total;
            for &d in &grid.deltas {
                let o = oryx_flops(t, c, c, c, d)?.total;
                let _ = writeln!(
                    s,
                    "{t}\t{c}\t{d}\t{attn}\t{lin}\t{o}\t{:.4}\t{}",
                    o as f64 / attn as f64,
                    crossover_length(c, d)?
                );
            }
        }
    }
    Ok(s)
}

pub fn run_gen_data(cfg: &RunConfig, kind: TaskKind, start: u64, count: usize) -> CliResult<PathBuf> {
    cfg.validate()?;
    let (path, lines) = match kind {
        TaskKind::Mqar => (
            cfg.output.dir.join("mqar.jsonl"),
            generate_mqar(&cfg.data, start, count)?
                .iter()
                .map(serde_json::to_string)
                .collect::<Result<Vec<_>, _>>(),
        ),
        TaskKind::Needle => (
            cfg.output.dir.join("needle.jsonl"),
            generate_needle(&cfg.eval.needle, start, count)?
                .iter()
                .map(serde_json::to_string)
                .collect::<Result<Vec<_>, _>>(),
        ),
    };
    let lines = lines.map_err(|e| CliError::Other(e.to_string()))?;
    prepare_dir(&cfg.output.dir)?;
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(&path, text).map_err(io(&path))?;
    Ok(path)
}

pub fn inspect_checkpoint(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(io(path))?;
    let (h, payload) = checkpoint::decode_header(&bytes)?;
    let mut s = String::new();
    let _ = writeln!(s, "format version {}", h.version);
    let _ = writeln!(s, "precision {}", h.precision);
    let _ = writeln!(s, "step {}", h.step);
    let _ = writeln!(s, "model digest {}", hex::encode(h.digest));
    let _ = writeln!(s, "{} tensors, {} payload bytes", h.tensors.len(), payload.len());
    for t in &h.tensors {
        let _ = writeln!(s, "{}\t{}\t{:?}\t@{}", t.name, t.dtype, t.shape, t.offset);
    }
    Ok(s)
}
