use std::cell::Cell;

use super::*;
use crate::blocks::{Fwd, Variant};
use crate::latentworld::{gen_episode, WorldConfig};
use crate::numcore::{grad_check, GradCheckOptions, ParamStore, Tensor};
use crate::rng;
use crate::train::init_weights;

fn grid(frames: usize, g: usize, vocab: usize, fill: impl Fn(usize) -> u32) -> TokenGrid {
    TokenGrid::new(frames, g, vocab, (0..frames * g * g).map(fill).collect()).unwrap()
}

#[test]
fn cosine_schedule_endpoints() {
    let s = MaskSchedule::Cosine;
    assert_eq!(s.gamma(0.0), 1.0);
    assert_eq!(s.gamma(1.0), 0.0);
    assert!((s.gamma(0.5) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    let mut prev = 1.0;
    for i in 1..=100 {
        let g = s.gamma(i as f64 / 100.0);
        assert!(g <= prev);
        prev = g;
    }
}

#[test]
fn corruption_fraction_tracks_the_drawn_rate() {
    let g = grid(1, 317, 64, |i| (i % 64) as u32);
    assert!(g.tokens.len() >= 100_000);
    for seed in 0..5 {
        let mut r = rng::seeded(seed);
        let (out, rate) = corrupt_tokens(&g, 0.2, &mut r).unwrap();
        assert!((0.0..0.2).contains(&rate));
        let changed = out.tokens.iter().zip(&g.tokens).filter(|(a, b)| a != b).count();
        let frac = changed as f64 / g.tokens.len() as f64;
        assert!((frac - rate).abs() < 0.02, "seed {seed}: {frac} vs {rate}");
    }
}

#[test]
fn corruption_always_picks_a_different_valid_id() {
    let s = 8;
    for start in 0..s as u32 {
        let g = grid(1, 32, s, |_| start);
        let out = corrupt_at_rate(&g, 1.0, &mut rng::seeded(start as u64));
        let mut seen = [false; 8];
        for &t in &out.tokens {
            assert!(t < s as u32, "MASK or out-of-range id {t}");
            assert_ne!(t, start);
            seen[t as usize] = true;
        }
        assert_eq!(seen.iter().filter(|&&b| b).count(), s - 1);
    }
}

#[test]
fn corruption_replacements_are_uniform() {
    let s = 8;
    let g = grid(1, 265, s, |_| 3);
    let out = corrupt_at_rate(&g, 1.0, &mut rng::seeded(99));
    let mut counts = [0usize; 8];
    for &t in &out.tokens {
        counts[t as usize] += 1;
    }
    let n = out.tokens.len() as f64;
    let expected = n / 7.0;
    let chi2: f64 = counts
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != 3)
        .map(|(_, &c)| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 99.9th percentile of chi-square with 6 degrees of freedom.
    assert!(chi2 < 22.46, "chi2 {chi2}");
}

#[test]
fn zero_bound_disables_corruption() {
    let g = grid(2, 4, 8, |i| (i % 8) as u32);
    let (out, rate) = corrupt_tokens(&g, 0.0, &mut rng::seeded(1)).unwrap();
    assert_eq!((out, rate), (g.clone(), 0.0));
    assert!(corrupt_tokens(&g, 1.5, &mut rng::seeded(1)).is_err());
}

#[test]
fn masking_fraction_follows_the_schedule() {
    let g = grid(3, 64, 64, |i| (i % 64) as u32);
    let st = mask_future_at(&g, MaskSchedule::Cosine, &[0.0, 1.0, 0.5], &mut rng::seeded(2));
    let cells = g.cells();
    let frac = |k: usize| st.mask[k * cells..(k + 1) * cells].iter().filter(|&&m| m).count() as f64 / cells as f64;
    assert_eq!(frac(0), 1.0);
    assert_eq!(frac(1), 0.0);
    assert!((frac(2) - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.02, "{}", frac(2));
    for (i, &m) in st.mask.iter().enumerate() {
        assert_eq!(m, st.work_tokens.tokens[i] == 64);
        if !m {
            assert_eq!(st.work_tokens.tokens[i], g.tokens[i]);
        }
    }
    assert_eq!(st.work_tokens.vocab, 65);
}

#[test]
fn prepared_examples_only_mask_the_future() {
    let world = WorldConfig::default();
    let ep = gen_episode(4, &world).unwrap();
    let mut r = rng::seeded(5);
    let st = prepare_example(&ep.past_tokens, &ep.future_tokens, 0.2, MaskSchedule::Cosine, &mut r).unwrap();
    let past_len = ep.past_tokens.tokens.len();
    assert!(st.work_tokens.tokens[..past_len].iter().all(|&t| t < 64));
    assert_eq!(st.mask.len(), ep.future_tokens.tokens.len());
    for (i, &m) in st.mask.iter().enumerate() {
        assert_eq!(m, st.work_tokens.tokens[past_len + i] == 64);
    }
}

#[test]
fn uniform_logits_give_log_vocab() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.leaf(Tensor::zeros(&[2, 5, 64]), true).unwrap();
    let targets: Vec<u32> = (0..10).map(|i| i * 6).collect();
    let mask: Vec<bool> = (0..10).map(|i| i % 3 != 0).collect();
    let (loss, empty) = masked_ce_loss(&mut tape, logits, &targets, &mask).unwrap();
    assert!(!empty);
    assert!((tape.value(loss).item() - 64f64.ln()).abs() < 1e-12);
}

#[test]
fn unmasked_positions_get_no_gradient() {
    let mut r = rng::seeded(8);
    let mut tape = Tape::<f64>::new();
    let logits = tape.leaf(Tensor::randn(&[1, 6, 16], 1.0, &mut r), true).unwrap();
    let targets = [1, 2, 3, 4, 5, 6];
    let mask = [true, false, true, false, false, true];
    let (loss, _) = masked_ce_loss(&mut tape, logits, &targets, &mask).unwrap();
    let g = tape.backward(loss).unwrap().wrt(logits).unwrap();
    for (row, &m) in mask.iter().enumerate() {
        let part = &g.data()[row * 16..(row + 1) * 16];
        if m {
            assert!(part.iter().any(|&v| v != 0.0));
            assert!(part.iter().sum::<f64>().abs() < 1e-12);
        } else {
            assert!(part.iter().all(|&v| v == 0.0), "row {row}");
        }
    }
}

#[test]
fn empty_mask_is_flagged() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.leaf(Tensor::zeros(&[3, 8]), true).unwrap();
    let (loss, empty) = masked_ce_loss(&mut tape, logits, &[0, 1, 2], &[false; 3]).unwrap();
    assert!(empty);
    assert_eq!(tape.value(loss).item(), 0.0);
}

/// Favors `(cell + frame) % vocab` and counts its calls.
struct Counting {
    vocab: usize,
    tf: usize,
    cells: usize,
    calls: Cell<usize>,
    poison: bool,
}

impl MaskedPredictor for Counting {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn future_logits(&self, queries: &[MaskedQuery<'_>]) -> Result<Vec<Vec<f32>>> {
        self.calls.set(self.calls.get() + 1);
        Ok(queries
            .iter()
            .map(|_| {
                let mut out = vec![0.0f32; self.tf * self.cells * self.vocab];
                for k in 0..self.tf {
                    for c in 0..self.cells {
                        out[(k * self.cells + c) * self.vocab + (c + k) % self.vocab] = 8.0;
                    }
                }
                if self.poison {
                    out[5] = f32::NAN;
                }
                out
            })
            .collect())
    }
}

#[test]
fn decoding_uses_k_passes_per_frame_and_fills_every_cell() {
    let (g, s, tp, tf) = (4, 8, 2, 3);
    let past = grid(tp, g, s, |i| (i % s) as u32);
    let pa = ActionSequence::zeros(tp, 2);
    let fa = ActionSequence::zeros(tf, 2);
    for (steps, confidence_remask) in [(1, false), (2, false), (4, true)] {
        let model = Counting { vocab: s, tf, cells: g * g, calls: Cell::new(0), poison: false };
        let opts = DecodeOptions { steps, confidence_remask, ..DecodeOptions::default() };
        let out = decode_iterative(&model, &past, &pa, &fa, &opts, &mut rng::seeded(3)).unwrap();
        assert_eq!(model.calls.get(), tf * steps);
        assert_eq!(out.frames, tf);
        assert!(out.tokens.iter().all(|&t| t < s as u32));
        let k = 1;
        for c in 0..g * g {
            // The final pass is greedy over a peaked distribution.
            assert_eq!(out.frame(k)[c], ((c + k) % s) as u32);
        }
    }
}

#[test]
fn batched_decoding_matches_clip_count() {
    let past = grid(1, 4, 8, |_| 0);
    let pa = ActionSequence::zeros(1, 2);
    let fa = ActionSequence::zeros(2, 2);
    let jobs = vec![DecodeJob { past: &past, past_actions: &pa, future_actions: &fa }; 3];
    let model = Counting { vocab: 8, tf: 2, cells: 16, calls: Cell::new(0), poison: false };
    let out = decode_batch(&model, &jobs, &DecodeOptions::default(), &mut rng::seeded(1)).unwrap();
    assert_eq!(out.len(), 3);
    assert_eq!(model.calls.get(), 4);
}

#[test]
fn non_finite_logits_abort_decoding() {
    let past = grid(1, 4, 8, |_| 0);
    let pa = ActionSequence::zeros(1, 2);
    let fa = ActionSequence::zeros(1, 2);
    let model = Counting { vocab: 8, tf: 1, cells: 16, calls: Cell::new(0), poison: true };
    let err = decode_iterative(&model, &past, &pa, &fa, &DecodeOptions::default(), &mut rng::seeded(1)).unwrap_err();
    assert!(matches!(err, HwmError::Decode(ref m) if m.contains("frame 0")), "{err}");
}

fn tiny_world() -> WorldConfig {
    WorldConfig { grid: 4, vocab: 8, action_dim: 2, past_frames: 9, future_frames: 16, ..WorldConfig::default() }
}

fn tiny_cfg(variant: Variant) -> MaskedConfig {
    MaskedConfig { variant, layers: 2, dim: 8, heads: 2, mlp_hidden: 12, share_boundary: 1, ..MaskedConfig::default() }
}

fn tiny_batch(world: &WorldConfig, seed: u64) -> MaskedBatch {
    let ep = gen_episode(seed, world).unwrap();
    let mut r = rng::seeded(seed);
    let st = prepare_example(&ep.past_tokens, &ep.future_tokens, 0.2, MaskSchedule::Cosine, &mut r).unwrap();
    let mut mask = st.mask.clone();
    mask[0] = true;
    MaskedBatch {
        batch: 1,
        work: st.work_tokens.tokens,
        past_actions: ep.past_latent_actions(world).values,
        future_actions: ep.future_latent_actions(world).values,
        targets: ep.future_tokens.tokens,
        mask,
    }
}

#[test]
fn network_produces_future_logits_for_every_variant() {
    let world = tiny_world();
    for v in Variant::ALL {
        let (net, layout) = MaskedNet::new(&world, &tiny_cfg(v)).unwrap();
        let mut store = ParamStore::<f32>::zeros(layout);
        init_weights(&mut store, &MaskedNet::init_rules(), 1).unwrap();
        let runner = MaskedRunner::new(&net, &store).unwrap();
        let b = tiny_batch(&world, 2);
        let pa = ActionSequence::new(world.past_latent_frames(), 2, b.past_actions.clone()).unwrap();
        let fa = ActionSequence::new(world.future_latent_frames(), 2, b.future_actions.clone()).unwrap();
        let q = MaskedQuery { work: &b.work, past_actions: &pa, future_actions: &fa };
        let logits = runner.future_logits(&[q.clone(), q]).unwrap();
        assert_eq!(logits.len(), 2);
        assert_eq!(logits[0].len(), 2 * 16 * 8);
        assert_eq!(logits[0], logits[1]);
        let past = TokenGrid::new(2, 4, 8, b.work[..32].to_vec()).unwrap();
        let out = decode_iterative(&runner, &past, &pa, &fa, &DecodeOptions::default(), &mut rng::seeded(1)).unwrap();
        assert!(out.tokens.iter().all(|&t| t < 8));
    }
}

#[test]
fn network_rejects_out_of_range_tokens() {
    let world = tiny_world();
    let (net, layout) = MaskedNet::new(&world, &tiny_cfg(Variant::Base)).unwrap();
    let store = ParamStore::<f32>::zeros(layout);
    let mut b = tiny_batch(&world, 2);
    b.work[3] = 9;
    let rope = net.rope().unwrap();
    let mut tape = Tape::new();
    let err = net.loss(&mut Fwd::new(&mut tape, &store), &b, &rope).unwrap_err();
    assert!(matches!(err, HwmError::TokenOutOfRange { id: 9, .. }));
}

#[test]
fn network_gradients_match_finite_differences() {
    let world = tiny_world();
    for v in Variant::ALL {
        let (net, layout) = MaskedNet::new(&world, &tiny_cfg(v)).unwrap();
        let mut store = ParamStore::<f64>::zeros(layout);
        init_weights(&mut store, &MaskedNet::init_rules(), 3).unwrap();
        // Larger weights keep the check away from the flat initial regime.
        let mut r = rng::seeded(4);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::randn(&shape, 0.3, &mut r)).unwrap();
        }
        let b = tiny_batch(&world, 5);
        let rope = net.rope::<f64>().unwrap();
        let opts = GradCheckOptions { max_entries_per_param: Some(3), ..GradCheckOptions::default() };
        let report = grad_check(&store, |s, t| net.loss(&mut Fwd::new(t, s), &b, &rope), &opts).unwrap();
        assert!(report.max_rel_err() <= 1e-4, "{v:?}: {}", report.max_rel_err());
    }
}

#[test]
fn init_rules_cover_every_parameter() {
    let (_, layout) = MaskedNet::new(&WorldConfig::default(), &MaskedConfig::default()).unwrap();
    let mut store = ParamStore::<f32>::zeros(layout);
    init_weights(&mut store, &MaskedNet::init_rules(), 1).unwrap();
    assert!(store.by_name("final_norm.weight").unwrap().data().iter().all(|&v| v == 1.0));
    assert!(store.by_name("head.bias").unwrap().data().iter().all(|&v| v == 0.0));
    let bound = crate::train::xavier_bound(&[128, 64]) as f32;
    assert!(store.by_name("head.weight").unwrap().data().iter().all(|v| v.abs() <= bound));
}
