//! Whole runs: one JSON-serializable config, named presets, and the
//! train / sample / eval / bench / params operations behind the CLI.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::blocks::{Fwd, Variant};
use crate::error::{HwmError, Result};
use crate::evalbench::{self, BenchOptions, EvalReport};
use crate::flow_hwm::{euler_sample, FlowConfig, FlowNet, FlowObjective, FlowRunner};
use crate::latentworld::{attach_latents, embed_tokens, gen_episode, oracle_future, quantize, write_episode, write_token_png, Codebook, Episode, LatentClip, TokenGrid, WorldConfig};
use crate::masked_hwm::{decode_batch, DecodeJob, MaskedConfig, MaskedNet, MaskedObjective, MaskedRunner};
use crate::numcore::{ParamLayout, ParamStore, Tape};
use crate::rng;
use crate::train::{init_weights, train_loop, Checkpoint, InitRule, Schedule, TrainConfig, TrainOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    Masked,
    Flow,
}

impl Paradigm {
    pub fn slug(self) -> &'static str {
        match self {
            Paradigm::Masked => "masked",
            Paradigm::Flow => "flow",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out episodes scored by `eval`.
    pub episodes: usize,
    /// Root of the held-out episode seeds, disjoint from training streams.
    pub seed: u64,
    /// Clips decoded together.
    pub batch: usize,
    pub bench: BenchOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 64, seed: 0xe7a1_5eed, batch: 16, bench: BenchOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paradigm: Paradigm,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub world: WorldConfig,
    pub masked: MaskedConfig,
    pub flow: FlowConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset("masked-base", false).expect("built-in preset")
    }
}

pub const PRESETS: [&str; 8] = [
    "masked-base",
    "masked-split",
    "masked-modshare",
    "masked-fullshare",
    "flow-base",
    "flow-split",
    "flow-modshare",
    "flow-fullshare",
];

/// Toy training schedule for the masked family.
pub fn masked_toy_train() -> TrainConfig {
    TrainConfig {
        steps: 1500,
        batch_size: 8,
        lr: 1e-3,
        schedule: Schedule::LinearWarmupDecay,
        warmup_steps: 75,
        ..TrainConfig::default()
    }
}

/// Toy training schedule for the flow family.
pub fn flow_toy_train() -> TrainConfig {
    TrainConfig { steps: 5000, batch_size: 16, lr: 1e-3, schedule: Schedule::Cosine, warmup_steps: 0, ..TrainConfig::default() }
}

impl RunConfig {
    /// `{masked,flow}-{base,split,modshare,fullshare}`, at toy or full scale.
    pub fn preset(name: &str, full_scale: bool) -> Result<Self> {
        let (family, block) = name
            .split_once('-')
            .ok_or_else(|| HwmError::Config(format!("unknown preset `{name}`; expected one of {}", PRESETS.join(", "))))?;
        let variant = Variant::ALL
            .into_iter()
            .find(|v| v.slug() == block)
            .ok_or_else(|| HwmError::Config(format!("unknown preset `{name}`; expected one of {}", PRESETS.join(", "))))?;
        let mut cfg = RunConfig {
            paradigm: Paradigm::Masked,
            seed: 0,
            out_dir: PathBuf::from("runs").join(name),
            world: WorldConfig::default(),
            masked: MaskedConfig { variant, ..MaskedConfig::default() },
            flow: FlowConfig { variant, ..FlowConfig::default() },
            train: masked_toy_train(),
            eval: EvalConfig::default(),
        };
        match family {
            "masked" => {
                if full_scale {
                    cfg.masked = MaskedConfig::full_scale(variant);
                    // 8x8x8 discrete tokenizer: 32x32 latents over an 8*8*8*5*5*5 codebook.
                    cfg.world = WorldConfig { grid: 32, vocab: 64_000, ..cfg.world };
                    cfg.train = TrainConfig::masked_full_scale();
                }
            }
            "flow" => {
                cfg.paradigm = Paradigm::Flow;
                cfg.train = flow_toy_train();
                if full_scale {
                    cfg.flow = FlowConfig::full_scale(variant);
                    cfg.world = WorldConfig { grid: 16, channels: 16, action_dim: 25, ..cfg.world };
                    cfg.train = TrainConfig::flow_full_scale();
                }
            }
            _ => return Err(HwmError::Config(format!("unknown preset `{name}`; expected one of {}", PRESETS.join(", ")))),
        }
        Ok(cfg)
    }

    pub fn variant(&self) -> Variant {
        match self.paradigm {
            Paradigm::Masked => self.masked.variant,
            Paradigm::Flow => self.flow.variant,
        }
    }

    pub fn name(&self) -> String {
        format!("{}-{}", self.paradigm.slug(), self.variant().slug())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies `key=value` where `key` is a dotted path to an existing field.
    /// Values parse as JSON, falling back to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| HwmError::Config(format!("override `{assignment}` is not key=value")))?;
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| HwmError::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        *self = serde_json::from_value(doc).map_err(|e| HwmError::Config(format!("bad value for `{key}`: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        if self.eval.episodes == 0 || self.eval.batch == 0 {
            return Err(HwmError::Config("eval episodes and batch must be positive".into()));
        }
        match self.paradigm {
            Paradigm::Masked => MaskedNet::new(&self.world, &self.masked).map(drop),
            Paradigm::Flow => FlowNet::new(&self.world, &self.flow).map(drop),
        }
    }

    pub fn layout(&self) -> Result<ParamLayout> {
        Ok(match self.paradigm {
            Paradigm::Masked => MaskedNet::new(&self.world, &self.masked)?.1,
            Paradigm::Flow => FlowNet::new(&self.world, &self.flow)?.1,
        })
    }

    /// Stored parameter count, shared storage counted once.
    pub fn param_count(&self) -> Result<usize> {
        Ok(self.layout()?.count())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        TrainOutput::checkpoint_path(&self.out_dir)
    }

    fn init_rules(&self) -> Vec<InitRule> {
        match self.paradigm {
            Paradigm::Masked => MaskedNet::init_rules(),
            Paradigm::Flow => FlowNet::init_rules(),
        }
    }

    /// Freshly initialized weights for this config.
    pub fn init_params(&self) -> Result<ParamStore<f32>> {
        let mut store = ParamStore::zeros(self.layout()?);
        init_weights(&mut store, &self.init_rules(), rng::derive_seed(self.seed, "init", 0))?;
        Ok(store)
    }

    pub fn load_params(&self, path: &Path) -> Result<Checkpoint> {
        Checkpoint::load(path, self.layout()?)
    }

    fn held_out(&self) -> Vec<u64> {
        (0..self.eval.episodes as u64).map(|i| rng::derive_seed(self.eval.seed, "eval-episode", i)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: f64,
    pub skipped_steps: usize,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Trains from scratch, or from the checkpoint in `out_dir` when `resume`
/// is set. Writes `config.json`, `metrics.tsv` and `checkpoint.hwmc`.
pub fn train(cfg: &RunConfig, resume: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| HwmError::io(dir, e))?;
    let config_json = cfg.to_json()?;
    let config_path = dir.join("config.json");
    std::fs::write(&config_path, &config_json).map_err(|e| HwmError::io(&config_path, e))?;
    let (params, moments) = if resume {
        let ck = cfg.load_params(&cfg.checkpoint_path())?;
        (ck.params, ck.moments)
    } else {
        (cfg.init_params()?, None)
    };
    let out = TrainOutput { dir: Some(dir.clone()), config_json };
    let result = match cfg.paradigm {
        Paradigm::Masked => {
            let (net, _) = MaskedNet::new(&cfg.world, &cfg.masked)?;
            train_loop(&MaskedObjective::new(net, cfg.world.clone())?, params, moments, &cfg.train, cfg.seed, &out)?
        }
        Paradigm::Flow => {
            let (net, _) = FlowNet::new(&cfg.world, &cfg.flow)?;
            train_loop(&FlowObjective::new(net)?, params, moments, &cfg.train, cfg.seed, &out)?
        }
    };
    Ok(TrainSummary {
        steps: result.moments.step as usize,
        final_loss: result.losses.last().copied().unwrap_or(f64::NAN),
        skipped_steps: result.skipped_steps,
        checkpoint: cfg.checkpoint_path(),
        metrics: TrainOutput::metrics_path(dir),
    })
}

/// Predicted futures for a set of episodes.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub episodes: Vec<Episode>,
    pub tokens: Vec<TokenGrid>,
    /// Only for the flow paradigm.
    pub latents: Option<Vec<LatentClip>>,
}

/// Where predictions come from.
pub enum Source<'a> {
    Weights(&'a ParamStore<f32>),
    /// The world's own dynamics.
    Oracle,
}

pub fn predict(cfg: &RunConfig, source: Source<'_>, episode_seeds: &[u64], sample_seed: u64) -> Result<Predictions> {
    let codebook = Codebook::new(cfg.world.vocab, cfg.world.channels, cfg.world.codebook_seed)?;
    let mut episodes = episode_seeds.iter().map(|&s| gen_episode(s, &cfg.world)).collect::<Result<Vec<_>>>()?;
    if cfg.paradigm == Paradigm::Flow {
        for e in &mut episodes {
            attach_latents(e, &codebook, cfg.world.jitter)?;
        }
    }
    let store = match source {
        Source::Oracle => {
            let tokens = episodes
                .iter()
                .map(|e| oracle_future(&e.past_tokens, &e.future_latent_actions(&cfg.world), &cfg.world, e.seed))
                .collect::<Result<Vec<_>>>()?;
            let latents = match cfg.paradigm {
                Paradigm::Masked => None,
                Paradigm::Flow => Some(tokens.iter().map(|t| clean_latents(t, &codebook)).collect::<Result<_>>()?),
            };
            return Ok(Predictions { episodes, tokens, latents });
        }
        Source::Weights(store) => store,
    };
    let mut tokens = Vec::with_capacity(episodes.len());
    let mut latents = Vec::new();
    match cfg.paradigm {
        Paradigm::Masked => {
            let (net, _) = MaskedNet::new(&cfg.world, &cfg.masked)?;
            let runner = MaskedRunner::new(&net, store)?;
            for (k, chunk) in episodes.chunks(cfg.eval.batch).enumerate() {
                let actions: Vec<_> = chunk.iter().map(|e| (e.past_latent_actions(&cfg.world), e.future_latent_actions(&cfg.world))).collect();
                let jobs: Vec<DecodeJob<'_>> = chunk
                    .iter()
                    .zip(&actions)
                    .map(|(e, (ap, af))| DecodeJob { past: &e.past_tokens, past_actions: ap, future_actions: af })
                    .collect();
                let mut r = rng::stream(sample_seed, "decode", k as u64);
                tokens.extend(decode_batch(&runner, &jobs, &cfg.masked.decode, &mut r)?);
            }
        }
        Paradigm::Flow => {
            let (net, _) = FlowNet::new(&cfg.world, &cfg.flow)?;
            let obj = FlowObjective::new(net)?;
            let runner = FlowRunner::new(&obj.net, store)?;
            let shape = (obj.net.future_frames(), cfg.world.channels, cfg.world.grid);
            for (k, chunk) in episodes.chunks(cfg.eval.batch).enumerate() {
                let conds = chunk.iter().map(|e| obj.episode(e.seed).map(|(c, _)| c)).collect::<Result<Vec<_>>>()?;
                let refs: Vec<_> = conds.iter().collect();
                let seed = rng::derive_seed(sample_seed, "flow-sample", k as u64);
                for clip in euler_sample(&runner, &refs, shape, cfg.flow.sample_steps, &cfg.flow.guidance, seed)? {
                    tokens.push(quantize(&clip, &codebook)?);
                    latents.push(clip);
                }
            }
        }
    }
    let latents = (cfg.paradigm == Paradigm::Flow).then_some(latents);
    Ok(Predictions { episodes, tokens, latents })
}

fn clean_latents(tokens: &TokenGrid, codebook: &Codebook) -> Result<LatentClip> {
    embed_tokens(tokens, codebook, 0.0, &mut rng::seeded(0))
}

/// Scores held-out predictions against the oracle future. Throughput is
/// left to [`bench`].
pub fn evaluate(cfg: &RunConfig, source: Source<'_>) -> Result<EvalReport> {
    cfg.validate()?;
    let seeds = cfg.held_out();
    let velocity = match (&source, cfg.paradigm) {
        (Source::Weights(store), Paradigm::Flow) => Some(velocity_mse(cfg, store, &seeds)?),
        _ => None,
    };
    let preds = predict(cfg, source, &seeds, rng::derive_seed(cfg.eval.seed, "eval-sample", 0))?;
    let codebook = Codebook::new(cfg.world.vocab, cfg.world.channels, cfg.world.codebook_seed)?;
    let pairs: Vec<_> = preds.tokens.iter().cloned().zip(preds.episodes.iter().map(|e| e.future_tokens.clone())).collect();
    let accuracy = evalbench::mean_token_accuracy(&pairs)?;
    let mut pred_flat = Vec::new();
    let mut true_flat = Vec::new();
    for (i, (p, t)) in pairs.iter().enumerate() {
        let pl = match &preds.latents {
            Some(l) => l[i].clone(),
            None => clean_latents(p, &codebook)?,
        };
        pred_flat.push(pl.values.iter().map(|&v| v as f64).collect::<Vec<f64>>());
        true_flat.push(clean_latents(t, &codebook)?.values.iter().map(|&v| v as f64).collect::<Vec<f64>>());
    }
    let all_pred: Vec<f64> = pred_flat.concat();
    let all_true: Vec<f64> = true_flat.concat();
    let peak = evalbench::data_range(&all_true);
    let count = cfg.param_count()?;
    Ok(EvalReport {
        name: cfg.name(),
        params_billions: Some(count as f64 / 1e9),
        peak_param_bytes: Some(4 * count),
        peak_activation_bytes: None,
        samples_per_second: None,
        frechet_proxy: Some(evalbench::frechet_proxy(&pred_flat, &true_flat)?),
        psnr_db: Some(evalbench::psnr(&all_pred, &all_true, peak)?),
        token_accuracy: Some(accuracy),
        velocity_mse: velocity.map(|v| v.0),
        velocity_baseline: velocity.map(|v| v.1),
    })
}

/// Conditional velocity error on held-out clips, and the error of
/// predicting zero on the same draws.
pub fn velocity_mse(cfg: &RunConfig, store: &ParamStore<f32>, seeds: &[u64]) -> Result<(f64, f64)> {
    let (net, _) = FlowNet::new(&cfg.world, &cfg.flow)?;
    let obj = FlowObjective::new(net)?;
    let (mut err, mut base, mut n) = (0.0, 0.0, 0.0);
    for (k, chunk) in seeds.chunks(cfg.eval.batch).enumerate() {
        let mut b = obj.batch_from(chunk, rng::derive_seed(cfg.eval.seed, "eval-noise", k as u64))?;
        b.drop.iter_mut().for_each(|d| *d = false);
        let mut tape = Tape::new();
        let loss = obj.net.loss(&mut Fwd::new(&mut tape, store), &b, &obj.rope)?;
        let w = b.target.len() as f64;
        err += tape.value(loss).item() as f64 * w;
        base += b.target.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        n += w;
    }
    Ok((err / n, base / n))
}

/// Sampling throughput and memory of this config's model. Weights do not
/// change the cost, so fresh ones are used.
pub fn bench(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let store = cfg.init_params()?;
    let report = match cfg.paradigm {
        Paradigm::Masked => {
            let (net, _) = MaskedNet::new(&cfg.world, &cfg.masked)?;
            evalbench::bench_masked(&net, &cfg.world, &store, cfg.eval.batch, cfg.seed, &cfg.eval.bench)?
        }
        Paradigm::Flow => {
            let (net, _) = FlowNet::new(&cfg.world, &cfg.flow)?;
            evalbench::bench_flow(&net, &store, cfg.eval.batch, cfg.seed, &cfg.eval.bench)?
        }
    };
    Ok(EvalReport {
        name: cfg.name(),
        params_billions: Some(store.count() as f64 / 1e9),
        peak_param_bytes: Some(report.param_bytes),
        peak_activation_bytes: Some(report.peak_activation_bytes),
        samples_per_second: Some(report.samples_per_second),
        ..EvalReport::default()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub preset: String,
    pub toy: usize,
    pub full: usize,
}

/// Parameter counts of every preset at toy and full scale.
pub fn params_table() -> Result<Vec<ParamRow>> {
    PRESETS
        .iter()
        .map(|&p| {
            Ok(ParamRow {
                preset: p.to_string(),
                toy: RunConfig::preset(p, false)?.param_count()?,
                full: RunConfig::preset(p, true)?.param_count()?,
            })
        })
        .collect()
}

/// Writes each prediction as an episode file plus a PNG with rows
/// past / predicted / oracle.
pub fn write_samples(dir: &Path, preds: &Predictions) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| HwmError::io(dir, e))?;
    let mut written = Vec::new();
    for (i, (ep, tokens)) in preds.episodes.iter().zip(&preds.tokens).enumerate() {
        let mut out = ep.clone();
        out.future_tokens = tokens.clone();
        if let Some(l) = &preds.latents {
            out.future_latents = Some(l[i].clone());
        }
        let path = dir.join(format!("sample_{i:03}.hwm"));
        write_episode(&path, &out)?;
        let png = dir.join(format!("sample_{i:03}.png"));
        write_token_png(&png, &[&ep.past_tokens, tokens, &ep.future_tokens], 8)?;
        written.push(path);
        written.push(png);
    }
    Ok(written)
}

/// `sample` seeds for `n` fresh clips.
pub fn sample_seeds(cfg: &RunConfig, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| rng::derive_seed(cfg.seed, "sample-episode", i)).collect()
}
