use std::sync::atomic::{AtomicUsize, Ordering};
use serde::{Deserialize, Serialize};

use super::{DecodeOptions, MaskSchedule, MaskedPredictor, MaskedQuery};
use crate::blocks::{block_forward, declare_blocks, BlockConfig, BlockParams, Decl, Fwd, Geometry, Linear, Mlp, Norm, RopeSet, Variant};
use crate::error::{HwmError, Result};
use crate::latentworld::WorldConfig;
use crate::numcore::{ParamId, ParamLayout, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::train::{Init, InitRule, Objective};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskedConfig {
    pub variant: Variant,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub share_boundary: usize,
    /// Upper bound of the corruption rate.
    pub rho_max: f64,
    pub schedule: MaskSchedule,
    pub decode: DecodeOptions,
}

impl Default for MaskedConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Base,
            layers: 4,
            dim: 128,
            heads: 8,
            mlp_hidden: 512,
            share_boundary: 1,
            rho_max: 0.2,
            schedule: MaskSchedule::Cosine,
            decode: DecodeOptions::default(),
        }
    }
}

impl MaskedConfig {
    /// 24 layers of 512-wide tokens, 8 heads, MLP 2048, sharing after layer 4.
    pub fn full_scale(variant: Variant) -> Self {
        Self { variant, layers: 24, dim: 512, heads: 8, mlp_hidden: 2048, share_boundary: 4, ..Self::default() }
    }

    pub fn blocks(&self) -> BlockConfig {
        BlockConfig {
            variant: self.variant,
            layers: self.layers,
            dim: self.dim,
            heads: self.heads,
            mlp_hidden: self.mlp_hidden,
            share_boundary: self.share_boundary,
            time_modulation: false,
            time_dim: 0,
        }
    }
}

/// One training batch, flattened per item.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub batch: usize,
    /// `B x T x G x G` ids with MASK.
    pub work: Vec<u32>,
    /// `B x Tp x z` latent actions.
    pub past_actions: Vec<f32>,
    /// `B x Tf x z`.
    pub future_actions: Vec<f32>,
    /// Clean future ids, `B x Tf x G x G`.
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
}

/// Masked world model: token and action embeddings, factorized blocks,
/// and a vocabulary head over future positions.
#[derive(Clone, Debug)]
pub struct MaskedNet {
    pub cfg: MaskedConfig,
    pub blocks_cfg: BlockConfig,
    pub geometry: Geometry,
    pub vocab: usize,
    pub action_dim: usize,
    tokens: ParamId,
    mask_token: ParamId,
    past_action: Mlp,
    future_action: Mlp,
    blocks: Vec<BlockParams>,
    final_norm: Norm,
    head: Linear,
}

impl MaskedNet {
    pub fn new(world: &WorldConfig, cfg: &MaskedConfig) -> Result<(Self, ParamLayout)> {
        let blocks_cfg = cfg.blocks();
        blocks_cfg.validate()?;
        let mut layout = ParamLayout::new();
        let mut d = Decl::new(&mut layout);
        let (h, s, z) = (cfg.dim, world.vocab, world.action_dim);
        let tokens = d.tensor("embed.tokens", None, &[s, h], true);
        let mask_token = d.tensor("embed.mask_token", None, &[1, h], true);
        let past_action = d.mlp_io("embed.past_actions", z, h, h);
        let future_action = d.mlp_io("embed.future_actions", z, h, h);
        let blocks = declare_blocks(&mut d, &blocks_cfg)?;
        let final_norm = d.norm("final_norm", None, h);
        let head = d.linear("head", None, h, s);
        let geometry = Geometry {
            tp: world.past_latent_frames(),
            tf: world.future_latent_frames(),
            rows: world.grid,
            cols: world.grid,
        };
        let net = Self {
            cfg: cfg.clone(),
            blocks_cfg,
            geometry,
            vocab: s,
            action_dim: z,
            tokens,
            mask_token,
            past_action,
            future_action,
            blocks,
            final_norm,
            head,
        };
        Ok((net, layout))
    }

    /// Normal(0, 0.02) everywhere except Xavier for the mask token and the
    /// output head; norm gains start at one and biases at zero.
    pub fn init_rules() -> Vec<InitRule> {
        vec![
            InitRule::new("embed.mask_token", Init::XavierUniform),
            InitRule::new("head.weight", Init::XavierUniform),
            InitRule::new("*norm*.weight", Init::Ones),
            InitRule::new("*.bias", Init::Zeros),
            InitRule::new("*", Init::Normal { std: 0.02 }),
        ]
    }

    /// Future logits `[B, Tf * G * G, s]`.
    pub fn forward<T: Scalar>(
        &self,
        f: &mut Fwd<'_, T>,
        work: &[u32],
        past_actions: &[f32],
        future_actions: &[f32],
        batch: usize,
        rope: &RopeSet<T>,
    ) -> Result<Var> {
        let g = &self.geometry;
        let (h, z) = (self.cfg.dim, self.action_dim);
        let (cells, frames) = (g.hw(), g.frames());
        if work.len() != batch * frames * cells
            || past_actions.len() != batch * g.tp * z
            || future_actions.len() != batch * g.tf * z
        {
            return Err(HwmError::dim("masked forward", "batch buffers do not match the model geometry"));
        }
        if let Some(&bad) = work.iter().find(|&&t| t as usize > self.vocab) {
            return Err(HwmError::TokenOutOfRange { id: bad, vocab: self.vocab + 1 });
        }
        let tokens = f.p(self.tokens)?;
        let mask = f.p(self.mask_token)?;
        let table = f.tape.concat(&[tokens, mask], 0)?;
        let ids: Vec<usize> = work.iter().map(|&t| t as usize).collect();
        let video = f.tape.embedding(table, &ids)?;
        let video = f.tape.reshape(video, &[batch, frames * cells, h])?;
        let to = |v: &[f32], n: usize| Tensor::new(vec![batch, n, z], v.iter().map(|&x| T::of(x as f64)).collect());
        let ap = f.tape.constant(to(past_actions, g.tp)?)?;
        let ap = f.mlp(ap, &self.past_action)?;
        let af = f.tape.constant(to(future_actions, g.tf)?)?;
        let af = f.mlp(af, &self.future_action)?;
        let mut x = f.tape.concat(&[video, ap, af], 1)?;
        for p in &self.blocks {
            x = block_forward(f, p, &self.blocks_cfg, x, None, g, rope)?;
        }
        let b = g.bounds();
        let vf = f.tape.slice(x, 1, b[1], b[2] - b[1])?;
        let vf = f.norm(vf, Some(&self.final_norm))?;
        f.linear(vf, &self.head)
    }

    pub fn rope<T: Scalar>(&self) -> Result<std::sync::Arc<RopeSet<T>>> {
        RopeSet::new(&self.blocks_cfg, &self.geometry)
    }

    pub fn loss<T: Scalar>(&self, f: &mut Fwd<'_, T>, batch: &MaskedBatch, rope: &RopeSet<T>) -> Result<Var> {
        let logits = self.forward(f, &batch.work, &batch.past_actions, &batch.future_actions, batch.batch, rope)?;
        let (loss, _) = super::masked_ce_loss(f.tape, logits, &batch.targets, &batch.mask)?;
        Ok(loss)
    }
}

/// A network bound to trained weights, usable for decoding.
pub struct MaskedRunner<'a> {
    pub net: &'a MaskedNet,
    pub store: &'a ParamStore<f32>,
    pub rope: std::sync::Arc<RopeSet<f32>>,
    peak: AtomicUsize,
}

impl<'a> MaskedRunner<'a> {
    pub fn new(net: &'a MaskedNet, store: &'a ParamStore<f32>) -> Result<Self> {
        Ok(Self { net, store, rope: net.rope()?, peak: AtomicUsize::new(0) })
    }

    /// Largest tape footprint of any forward pass so far.
    pub fn peak_activation_bytes(&self) -> usize {
        self.peak.load(Ordering::Relaxed)
    }
}

impl MaskedPredictor for MaskedRunner<'_> {
    fn vocab(&self) -> usize {
        self.net.vocab
    }

    fn future_logits(&self, queries: &[MaskedQuery<'_>]) -> Result<Vec<Vec<f32>>> {
        let b = queries.len();
        let mut work = Vec::new();
        let (mut ap, mut af) = (Vec::new(), Vec::new());
        for q in queries {
            work.extend_from_slice(q.work);
            ap.extend_from_slice(&q.past_actions.values);
            af.extend_from_slice(&q.future_actions.values);
        }
        let mut tape = Tape::new();
        let mut f = Fwd::new(&mut tape, self.store);
        let logits = self.net.forward(&mut f, &work, &ap, &af, b, &self.rope)?;
        self.peak.fetch_max(tape.peak_activation_bytes(), Ordering::Relaxed);
        let data = tape.value(logits).data();
        let per = data.len() / b.max(1);
        Ok(data.chunks(per).map(<[f32]>::to_vec).collect())
    }
}

/// Training problem over freshly generated episodes. Item `i` of step `k`
/// uses episode and masking streams indexed by `k * batch + i`.
pub struct MaskedObjective {
    pub net: MaskedNet,
    pub world: WorldConfig,
    pub rope: std::sync::Arc<RopeSet<f32>>,
}

impl MaskedObjective {
    pub fn new(net: MaskedNet, world: WorldConfig) -> Result<Self> {
        let rope = net.rope()?;
        Ok(Self { net, world, rope })
    }

    /// Builds a batch from explicit episode seeds.
    pub fn batch_from(&self, episodes: &[u64], mask_seed: u64) -> Result<MaskedBatch> {
        let mut out = MaskedBatch {
            batch: episodes.len(),
            work: Vec::new(),
            past_actions: Vec::new(),
            future_actions: Vec::new(),
            targets: Vec::new(),
            mask: Vec::new(),
        };
        for (i, &ep_seed) in episodes.iter().enumerate() {
            let ep = crate::latentworld::gen_episode(ep_seed, &self.world)?;
            let mut r = crate::rng::stream(mask_seed, "mask", i as u64);
            let st = super::prepare_example(&ep.past_tokens, &ep.future_tokens, self.net.cfg.rho_max, self.net.cfg.schedule, &mut r)?;
            out.work.extend(st.work_tokens.tokens);
            out.past_actions.extend(ep.past_latent_actions(&self.world).values);
            out.future_actions.extend(ep.future_latent_actions(&self.world).values);
            out.targets.extend(ep.future_tokens.tokens);
            out.mask.extend(st.mask);
        }
        Ok(out)
    }
}

impl Objective for MaskedObjective {
    type Batch = MaskedBatch;

    fn make_batch(&self, seed: u64, step: usize, batch_size: usize) -> Result<MaskedBatch> {
        let base = (step * batch_size) as u64;
        let episodes: Vec<u64> =
            (0..batch_size as u64).map(|i| crate::rng::derive_seed(seed, "train-episode", base + i)).collect();
        self.batch_from(&episodes, crate::rng::derive_seed(seed, "train-mask", step as u64))
    }

    fn loss(&self, f: &mut Fwd<'_, f32>, batch: &MaskedBatch) -> Result<Var> {
        self.net.loss(f, batch, &self.rope)
    }
}
