use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{interpolate, patch_dim, patchify_values, unpatchify_values, FlowCondition, GuidanceConfig, VelocityModel, DEFAULT_SIGMA_MIN};
use crate::blocks::timestep::TimeEmbedder;
use crate::blocks::{block_forward, declare_blocks, BlockConfig, BlockParams, Decl, Fwd, Geometry, Linear, Mlp, RopeSet, Variant};
use crate::error::{HwmError, Result};
use crate::latentworld::{attach_latents, gen_episode, Codebook, WorldConfig};
use crate::numcore::{ParamId, ParamLayout, ParamStore, Tape, Tensor, Var};
use crate::rng;
use crate::scalar::Scalar;
use crate::train::{Init, InitRule, Objective};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub variant: Variant,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub share_boundary: usize,
    /// Width of the time embedding that drives modulation.
    pub time_dim: usize,
    /// Sinusoidal feature count fed to the time embedder.
    pub freq_dim: usize,
    /// Hidden width of the action embedders.
    pub action_hidden: usize,
    pub p_lw: usize,
    pub p_t: usize,
    pub sigma_min: f64,
    pub guidance: GuidanceConfig,
    pub sample_steps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Base,
            layers: 4,
            dim: 96,
            heads: 4,
            mlp_hidden: 384,
            share_boundary: 1,
            time_dim: 128,
            freq_dim: 128,
            action_hidden: 384,
            p_lw: 2,
            p_t: 1,
            sigma_min: DEFAULT_SIGMA_MIN,
            guidance: GuidanceConfig::default(),
            sample_steps: 50,
        }
    }
}

impl FlowConfig {
    /// 17 layers of 1172-wide tokens, MLP ratio 4, sharing after layer 4.
    pub fn full_scale(variant: Variant) -> Self {
        Self {
            variant,
            layers: 17,
            dim: 1172,
            heads: 4,
            mlp_hidden: 4 * 1172,
            share_boundary: 4,
            time_dim: 512,
            freq_dim: 256,
            action_hidden: 4 * 1172,
            ..Self::default()
        }
    }

    pub fn blocks(&self) -> BlockConfig {
        BlockConfig {
            variant: self.variant,
            layers: self.layers,
            dim: self.dim,
            heads: self.heads,
            mlp_hidden: self.mlp_hidden,
            share_boundary: self.share_boundary,
            time_modulation: true,
            time_dim: self.time_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.blocks().validate()?;
        self.guidance.validate()?;
        if self.freq_dim == 0 || self.freq_dim % 2 != 0 {
            return Err(HwmError::Config(format!("freq_dim {} must be even and positive", self.freq_dim)));
        }
        if !(self.sigma_min >= 0.0 && self.sigma_min < 1.0) {
            return Err(HwmError::Config(format!("sigma_min {} must be in [0, 1)", self.sigma_min)));
        }
        if self.sample_steps == 0 {
            return Err(HwmError::Config("sample_steps must be positive".into()));
        }
        Ok(())
    }
}

/// One batch in patch layout. Per item: `xt` and `target` are
/// `[tf * P, patch_dim]`, `past` is `[tp * P, patch_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowBatch {
    pub batch: usize,
    pub xt: Vec<f32>,
    pub target: Vec<f32>,
    pub past: Vec<f32>,
    /// `[B, tp, z]` actions per patch frame.
    pub past_actions: Vec<f32>,
    pub future_actions: Vec<f32>,
    pub t: Vec<f64>,
    /// Items whose conditioning is replaced by the null tokens.
    pub drop: Vec<bool>,
}

/// Flow model: shared patch embedding, action MLPs, time embedder,
/// modulated blocks and a modulated linear head back to patch space.
#[derive(Clone, Debug)]
pub struct FlowNet {
    pub cfg: FlowConfig,
    pub blocks_cfg: BlockConfig,
    pub geometry: Geometry,
    pub world: WorldConfig,
    pub patch_dim: usize,
    patch_embed: Linear,
    past_action: Mlp,
    future_action: Mlp,
    time: TimeEmbedder,
    blocks: Vec<BlockParams>,
    final_mod: Linear,
    final_linear: Linear,
    null: [ParamId; 3],
}

impl FlowNet {
    pub fn new(world: &WorldConfig, cfg: &FlowConfig) -> Result<(Self, ParamLayout)> {
        cfg.validate()?;
        let (tp, tf) = (world.past_latent_frames(), world.future_latent_frames());
        if world.grid % cfg.p_lw != 0 || tp % cfg.p_t != 0 || tf % cfg.p_t != 0 {
            return Err(HwmError::Config(format!(
                "patch {}x{} does not tile a {}x{} grid with {tp}+{tf} latent frames",
                cfg.p_lw, cfg.p_t, world.grid, world.grid
            )));
        }
        let blocks_cfg = cfg.blocks();
        let (h, z) = (cfg.dim, world.action_dim);
        let pd = patch_dim(world.channels, cfg.p_lw, cfg.p_t);
        let mut layout = ParamLayout::new();
        let mut d = Decl::new(&mut layout);
        let patch_embed = d.linear("patch_embed", None, pd, h);
        let past_action = d.mlp_io("embed.past_actions", z, cfg.action_hidden, h);
        let future_action = d.mlp_io("embed.future_actions", z, cfg.action_hidden, h);
        let time = TimeEmbedder::declare(&mut d, "time_embed", cfg.freq_dim, cfg.time_dim);
        let null = [
            d.tensor("null.v_p", None, &[h], false),
            d.tensor("null.a_p", None, &[h], false),
            d.tensor("null.a_f", None, &[h], false),
        ];
        let blocks = declare_blocks(&mut d, &blocks_cfg)?;
        let final_mod = d.modulation("final.mod", None, cfg.time_dim, 2 * h);
        let final_linear = d.linear("final.linear", None, h, pd);
        let geometry = Geometry { tp: tp / cfg.p_t, tf: tf / cfg.p_t, rows: world.grid / cfg.p_lw, cols: world.grid / cfg.p_lw };
        let net = Self {
            cfg: cfg.clone(),
            blocks_cfg,
            geometry,
            world: world.clone(),
            patch_dim: pd,
            patch_embed,
            past_action,
            future_action,
            time,
            blocks,
            final_mod,
            final_linear,
            null,
        };
        Ok((net, layout))
    }

    /// Normal(0, 0.02) throughout, Xavier for the output projection.
    pub fn init_rules() -> Vec<InitRule> {
        vec![
            InitRule::new("final.linear.weight", Init::XavierUniform),
            InitRule::new("*norm*.weight", Init::Ones),
            InitRule::new("*.bias", Init::Zeros),
            InitRule::new("*", Init::Normal { std: 0.02 }),
        ]
    }

    pub fn rope<T: Scalar>(&self) -> Result<Arc<RopeSet<T>>> {
        RopeSet::new(&self.blocks_cfg, &self.geometry)
    }

    /// Latent frames of the predicted future clip.
    pub fn future_frames(&self) -> usize {
        self.geometry.tf * self.cfg.p_t
    }

    /// Predicted velocity `[B, tf * P, patch_dim]`.
    pub fn forward<T: Scalar>(&self, f: &mut Fwd<'_, T>, b: &FlowBatch, rope: &RopeSet<T>) -> Result<Var> {
        let g = &self.geometry;
        let (h, z, pd, n) = (self.cfg.dim, self.world.action_dim, self.patch_dim, b.batch);
        let hw = g.hw();
        if b.xt.len() != n * g.tf * hw * pd
            || b.past.len() != n * g.tp * hw * pd
            || b.past_actions.len() != n * g.tp * z
            || b.future_actions.len() != n * g.tf * z
            || b.t.len() != n
            || b.drop.len() != n
        {
            return Err(HwmError::dim("flow forward", "batch buffers do not match the model geometry"));
        }
        let to = |v: &[f32], shape: Vec<usize>| Tensor::new(shape, v.iter().map(|&x| T::of(x as f64)).collect());
        let xt = f.tape.constant(to(&b.xt, vec![n, g.tf * hw, pd])?)?;
        let vf = f.linear(xt, &self.patch_embed)?;
        let past = f.tape.constant(to(&b.past, vec![n, g.tp * hw, pd])?)?;
        let vp = f.linear(past, &self.patch_embed)?;
        let ap = f.tape.constant(to(&b.past_actions, vec![n, g.tp, z])?)?;
        let ap = f.mlp(ap, &self.past_action)?;
        let af = f.tape.constant(to(&b.future_actions, vec![n, g.tf, z])?)?;
        let af = f.mlp(af, &self.future_action)?;
        let (vp, ap, af) = if b.drop.iter().any(|&d| d) {
            let mut swap = |x: Var, id: ParamId, len: usize| -> Result<Var> {
                let null = f.p(id)?;
                let null = f.tape.expand_axis(null, 0, len)?;
                f.tape.where_leading(&b.drop, x, null)
            };
            (swap(vp, self.null[0], g.tp * hw)?, swap(ap, self.null[1], g.tp)?, swap(af, self.null[2], g.tf)?)
        } else {
            (vp, ap, af)
        };
        let temb = self.time.forward(f, &b.t)?;
        let cond = f.tape.silu(temb)?;
        let mut x = f.tape.concat(&[vp, vf, ap, af], 1)?;
        for p in &self.blocks {
            x = block_forward(f, p, &self.blocks_cfg, x, Some(cond), g, rope)?;
        }
        let bounds = g.bounds();
        let out = f.tape.slice(x, 1, bounds[1], bounds[2] - bounds[1])?;
        let m = f.linear(cond, &self.final_mod)?;
        let mc = f.chunks(m, 2)?;
        let out = f.norm(out, None)?;
        let out = f.modulate(out, mc[0], mc[1])?;
        debug_assert_eq!(f.tape.shape(out)[2], h);
        f.linear(out, &self.final_linear)
    }

    /// Mean squared velocity error over every predicted element.
    pub fn loss<T: Scalar>(&self, f: &mut Fwd<'_, T>, b: &FlowBatch, rope: &RopeSet<T>) -> Result<Var> {
        let pred = self.forward(f, b, rope)?;
        let shape = f.tape.shape(pred).to_vec();
        let target = Tensor::new(shape, b.target.iter().map(|&x| T::of(x as f64)).collect())?;
        let target = f.tape.constant(target)?;
        f.tape.mse(pred, target)
    }

    /// Averages per-latent-frame actions over temporal patches.
    fn group_actions(&self, values: &[f32], frames: usize) -> Vec<f32> {
        let (z, pt) = (self.world.action_dim, self.cfg.p_t);
        let mut out = vec![0.0f32; frames / pt * z];
        for k in 0..frames {
            for j in 0..z {
                out[(k / pt) * z + j] += values[k * z + j] / pt as f32;
            }
        }
        out
    }

    fn to_patches(&self, values: &[f64], frames: usize) -> Result<Vec<f32>> {
        let w = &self.world;
        let t = patchify_values(values, frames, w.channels, w.grid, self.cfg.p_lw, self.cfg.p_t)?;
        Ok(t.data().iter().map(|&v| v as f32).collect())
    }

    fn from_patches(&self, values: &[f64]) -> Result<Vec<f64>> {
        let w = &self.world;
        unpatchify_values(values, self.future_frames(), w.channels, w.grid, self.cfg.p_lw, self.cfg.p_t)
    }

    /// Assembles a batch from explicit pieces, everything in latent layout.
    pub fn make_batch(&self, items: &[(&FlowCondition, Vec<f64>, Vec<f64>)], t: &[f64], drop: &[bool]) -> Result<FlowBatch> {
        let mut b = FlowBatch {
            batch: items.len(),
            xt: Vec::new(),
            target: Vec::new(),
            past: Vec::new(),
            past_actions: Vec::new(),
            future_actions: Vec::new(),
            t: t.to_vec(),
            drop: drop.to_vec(),
        };
        let tp = self.geometry.tp * self.cfg.p_t;
        for (cond, xt, target) in items {
            let past: Vec<f64> = cond.past.values.iter().map(|&v| v as f64).collect();
            b.past.extend(self.to_patches(&past, tp)?);
            b.xt.extend(self.to_patches(xt, self.future_frames())?);
            b.target.extend(self.to_patches(target, self.future_frames())?);
            b.past_actions.extend(self.group_actions(&cond.past_actions.values, cond.past_actions.frames));
            b.future_actions.extend(self.group_actions(&cond.future_actions.values, cond.future_actions.frames));
        }
        Ok(b)
    }
}

/// Training problem: fresh episodes with codebook latents, one noise draw,
/// time and drop flag per item.
pub struct FlowObjective {
    pub net: FlowNet,
    pub codebook: Codebook,
    pub rope: Arc<RopeSet<f32>>,
}

impl FlowObjective {
    pub fn new(net: FlowNet) -> Result<Self> {
        let w = &net.world;
        let codebook = Codebook::new(w.vocab, w.channels, w.codebook_seed)?;
        let rope = net.rope()?;
        Ok(Self { net, codebook, rope })
    }

    /// Episode with latents attached, turned into a condition and its clean future.
    pub fn episode(&self, seed: u64) -> Result<(FlowCondition, Vec<f64>)> {
        let w = &self.net.world;
        let mut ep = gen_episode(seed, w)?;
        attach_latents(&mut ep, &self.codebook, w.jitter)?;
        let past = ep.past_latents.clone().ok_or_else(|| HwmError::Config("missing past latents".into()))?;
        let future = ep.future_latents.as_ref().ok_or_else(|| HwmError::Config("missing future latents".into()))?;
        let x1 = future.values.iter().map(|&v| v as f64).collect();
        let cond = FlowCondition {
            past,
            past_actions: ep.past_latent_actions(w),
            future_actions: ep.future_latent_actions(w),
        };
        Ok((cond, x1))
    }

    /// Batch over the given episode seeds; `noise_seed` drives t, x0 and drops.
    pub fn batch_from(&self, episodes: &[u64], noise_seed: u64) -> Result<FlowBatch> {
        let mut items = Vec::new();
        let (mut ts, mut drops) = (Vec::new(), Vec::new());
        let conds: Vec<(FlowCondition, Vec<f64>)> = episodes.iter().map(|&s| self.episode(s)).collect::<Result<_>>()?;
        for (i, (cond, x1)) in conds.iter().enumerate() {
            let mut r = rng::stream(noise_seed, "flow-noise", i as u64);
            let t: f64 = r.random();
            let drop = r.random::<f64>() < self.net.cfg.guidance.cond_drop_prob;
            let x0: Vec<f64> = (0..x1.len()).map(|_| StandardNormal.sample(&mut r)).collect();
            let (xt, vt) = interpolate(&x0, x1, t, self.net.cfg.sigma_min)?;
            items.push((cond, xt, vt));
            ts.push(t);
            drops.push(drop);
        }
        self.net.make_batch(&items, &ts, &drops)
    }
}

impl Objective for FlowObjective {
    type Batch = FlowBatch;

    fn make_batch(&self, seed: u64, step: usize, batch_size: usize) -> Result<FlowBatch> {
        let base = (step * batch_size) as u64;
        let episodes: Vec<u64> = (0..batch_size as u64).map(|i| rng::derive_seed(seed, "train-episode", base + i)).collect();
        self.batch_from(&episodes, rng::derive_seed(seed, "train-noise", step as u64))
    }

    fn loss(&self, f: &mut Fwd<'_, f32>, batch: &FlowBatch) -> Result<Var> {
        self.net.loss(f, batch, &self.rope)
    }
}

/// A network bound to weights, usable as a velocity field.
pub struct FlowRunner<'a> {
    pub net: &'a FlowNet,
    pub store: &'a ParamStore<f32>,
    pub rope: Arc<RopeSet<f32>>,
    peak: AtomicUsize,
}

impl<'a> FlowRunner<'a> {
    pub fn new(net: &'a FlowNet, store: &'a ParamStore<f32>) -> Result<Self> {
        Ok(Self { net, store, rope: net.rope()?, peak: AtomicUsize::new(0) })
    }

    /// Largest tape footprint of any forward pass so far.
    pub fn peak_activation_bytes(&self) -> usize {
        self.peak.load(Ordering::Relaxed)
    }
}

impl VelocityModel for FlowRunner<'_> {
    fn velocity(&self, x: &[Vec<f64>], conds: &[&FlowCondition], t: f64, uncond: bool) -> Result<Vec<Vec<f64>>> {
        let items: Vec<_> = x.iter().zip(conds).map(|(xi, c)| (*c, xi.clone(), vec![0.0; xi.len()])).collect();
        let batch = self.net.make_batch(&items, &vec![t; x.len()], &vec![uncond; x.len()])?;
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, self.store);
        let pred = self.net.forward(&mut f, &batch, &self.rope)?;
        self.peak.fetch_max(tape.peak_activation_bytes(), Ordering::Relaxed);
        let data = tape.value(pred).data();
        let per = data.len() / x.len().max(1);
        data.chunks(per)
            .map(|c| self.net.from_patches(&c.iter().map(|&v| v as f64).collect::<Vec<_>>()))
            .collect()
    }
}
