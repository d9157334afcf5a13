//! Optimization harness: AdamW, learning-rate schedules, initialization,
//! checkpoints and a deterministic training loop.

mod checkpoint;
mod init;
mod optim;

use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use init::{init_weights, xavier_bound, Init, InitRule};
pub use optim::{lr_at, AdamW, Moments, Schedule, StepInfo};

use crate::blocks::Fwd;
use crate::error::{HwmError, Result};
use crate::numcore::{ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub schedule: Schedule,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Record wall-clock milliseconds in the metrics log. Off by default so
    /// the log is a pure function of the seed.
    pub log_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 3e-4,
            schedule: Schedule::LinearWarmupDecay,
            warmup_steps: 100,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
            checkpoint_every: 0,
            log_timing: false,
        }
    }
}

impl TrainConfig {
    /// Masked setup: peak 3e-5, 100 warmup steps, linear decay.
    pub fn masked_full_scale() -> Self {
        Self { lr: 3e-5, schedule: Schedule::LinearWarmupDecay, warmup_steps: 100, batch_size: 16, ..Self::default() }
    }

    /// Flow setup: peak 1e-4, cosine, no warmup.
    pub fn flow_full_scale() -> Self {
        Self { lr: 1e-4, schedule: Schedule::Cosine, warmup_steps: 0, batch_size: 128, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HwmError::Config(m));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive".into());
        }
        if self.warmup_steps >= self.steps {
            return bad(format!("warmup_steps {} must be below steps {}", self.warmup_steps, self.steps));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight decay {} must be finite and non-negative", self.weight_decay));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm must be positive".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        lr_at(step, self.steps, self.lr, self.warmup_steps, self.schedule)
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW { weight_decay: self.weight_decay, ..AdamW::default() }
    }
}

/// A paradigm's training problem. Batches must be a pure function of
/// `(seed, step)` so they can be built ahead of the optimizer.
pub trait Objective: Sync {
    type Batch: Send;
    fn make_batch(&self, seed: u64, step: usize, batch_size: usize) -> Result<Self::Batch>;
    fn loss(&self, f: &mut Fwd<'_, f32>, batch: &Self::Batch) -> Result<Var>;
}

/// Where training writes. `None` keeps everything in memory.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
    /// Effective run config stored in every checkpoint.
    pub config_json: String,
}

impl TrainOutput {
    pub fn checkpoint_path(dir: &Path) -> PathBuf {
        dir.join("checkpoint.hwmc")
    }

    pub fn metrics_path(dir: &Path) -> PathBuf {
        dir.join("metrics.tsv")
    }
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub params: ParamStore<f32>,
    pub moments: Moments<f32>,
    pub losses: Vec<f64>,
    /// Tab-separated `step loss lr wall_ms` lines.
    pub metrics: String,
    pub skipped_steps: usize,
}

/// Runs `cfg.steps - start` optimizer steps from `params` (and `moments`
/// when resuming). Batches for upcoming steps are generated on a helper
/// thread, at most two ahead.
pub fn train_loop<O: Objective>(
    objective: &O,
    params: ParamStore<f32>,
    moments: Option<Moments<f32>>,
    cfg: &TrainConfig,
    seed: u64,
    out: &TrainOutput,
) -> Result<TrainResult> {
    cfg.validate()?;
    let mut moments = moments.unwrap_or_else(|| Moments::zeros(&params));
    let start = moments.step as usize;
    if start > cfg.steps {
        return Err(HwmError::Config(format!("resume step {start} is past the configured {} steps", cfg.steps)));
    }
    if let Some(dir) = &out.dir {
        std::fs::create_dir_all(dir).map_err(|e| HwmError::io(dir, e))?;
    }
    let opt = cfg.optimizer();
    let mut state = LoopState { params, losses: Vec::new(), metrics: String::new(), skipped: 0 };
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<O::Batch>>(2);
        scope.spawn(move || {
            for step in start..cfg.steps {
                if tx.send(objective.make_batch(seed, step, cfg.batch_size)).is_err() {
                    break;
                }
            }
        });
        for step in start..cfg.steps {
            let t0 = Instant::now();
            let batch = rx.recv().map_err(|_| HwmError::Training { step, reason: "batch producer stopped".into() })??;
            let mut tape = Tape::new();
            let loss = {
                let mut f = Fwd::new(&mut tape, &state.params);
                objective.loss(&mut f, &batch).map_err(|e| match e {
                    HwmError::NonFinite { kernel } => {
                        HwmError::Training { step: step + 1, reason: format!("non-finite value in `{kernel}`") }
                    }
                    e => e,
                })?
            };
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(HwmError::Training { step: step + 1, reason: format!("loss is {value}") });
            }
            let mut grads = tape.backward(loss)?.into_params();
            drop(tape);
            let lr = cfg.lr_at(step + 1);
            let info = opt.step(&mut state.params, &mut grads, &mut moments, lr, cfg.clip_norm);
            if info.skipped {
                state.skipped += 1;
                // Skipped updates still consume the step so schedules and
                // batch seeds stay aligned.
                moments.step += 1;
            }
            state.losses.push(value);
            let wall = if cfg.log_timing { format!("{:.3}", t0.elapsed().as_secs_f64() * 1e3) } else { "-".into() };
            let line = format!("{}\t{value:.6}\t{lr:.6e}\t{wall}\n", step + 1);
            state.metrics.push_str(&line);
            if let Some(dir) = &out.dir {
                append(&TrainOutput::metrics_path(dir), &line, step == 0)?;
                let done = step + 1;
                if done == cfg.steps || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
                    let ck = Checkpoint {
                        config: out.config_json.clone(),
                        step: done as u64,
                        seed,
                        params: state.params.clone(),
                        moments: Some(moments.clone()),
                    };
                    ck.save(&TrainOutput::checkpoint_path(dir))?;
                }
            }
        }
        Ok(())
    })?;
    Ok(TrainResult {
        params: state.params,
        moments,
        losses: state.losses,
        metrics: state.metrics,
        skipped_steps: state.skipped,
    })
}

struct LoopState {
    params: ParamStore<f32>,
    losses: Vec<f64>,
    metrics: String,
    skipped: usize,
}

fn append(path: &Path, line: &str, truncate: bool) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!truncate)
        .truncate(truncate)
        .open(path)
        .map_err(|e| HwmError::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| HwmError::io(path, e))
}
