use std::cell::Cell;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::blocks::{Fwd, Variant};
use crate::latentworld::WorldConfig;
use crate::numcore::{grad_check, GradCheckOptions, ParamStore, Tape};
use crate::train::{init_weights, Objective};

#[test]
fn interpolation_matches_direct_substitution() {
    let (xt, vt) = interpolate(&[2.0], &[4.0], 0.5, 0.001).unwrap();
    assert!((xt[0] - 3.001).abs() < 1e-12);
    assert!((vt[0] - 2.002).abs() < 1e-12);
    let (xt, _) = interpolate(&[0.3, -1.2], &[5.0, 7.0], 0.0, 0.2).unwrap();
    assert_eq!(xt, vec![0.3, -1.2]);
    let (xt, vt) = interpolate(&[0.3], &[5.0], 1.0, 0.0).unwrap();
    assert_eq!((xt[0], vt[0]), (5.0, 4.7));
    assert!(interpolate(&[0.0], &[1.0], 1.5, 0.0).is_err());
    assert!(interpolate(&[0.0, 1.0], &[1.0], 0.5, 0.0).is_err());
}

#[test]
fn velocity_is_the_time_derivative_of_the_path() {
    let mut r = rng::seeded(11);
    for _ in 0..20 {
        let x0: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut r)).collect();
        let x1: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut r)).collect();
        let sigma = r.random_range(0.0..0.1);
        let t = r.random_range(0.05..0.95);
        let h = 1e-5;
        let (hi, _) = interpolate(&x0, &x1, t + h, sigma).unwrap();
        let (lo, _) = interpolate(&x0, &x1, t - h, sigma).unwrap();
        let (_, vt) = interpolate(&x0, &x1, t, sigma).unwrap();
        for i in 0..8 {
            let fd = (hi[i] - lo[i]) / (2.0 * h);
            assert!((fd - vt[i]).abs() < 1e-8, "{fd} vs {}", vt[i]);
        }
    }
}

#[test]
fn guidance_combination_cases() {
    let c = vec![0.1, -2.5, 3.7];
    let u = vec![1.0, 0.25, -4.0];
    let one = cfg_combine(&c, &u, 1.0).unwrap();
    assert!(one.iter().zip(&c).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
    assert_eq!(cfg_combine(&[1.0], &[0.0], 3.0).unwrap(), vec![3.0]);
    let s0 = cfg_combine(&c, &u, 0.5).unwrap();
    let s1 = cfg_combine(&c, &u, 2.0).unwrap();
    let mid = cfg_combine(&c, &u, 1.25).unwrap();
    for i in 0..3 {
        assert!((mid[i] - 0.5 * (s0[i] + s1[i])).abs() < 1e-12);
    }
    assert!(cfg_combine(&c, &u[..2], 2.0).is_err());
    assert!(GuidanceConfig { scale: -1.0, cond_drop_prob: 0.1 }.validate().is_err());
    assert!(GuidanceConfig { scale: 3.0, cond_drop_prob: 1.5 }.validate().is_err());
}

fn clip(frames: usize, channels: usize, grid: usize) -> LatentClip {
    let n = frames * channels * grid * grid;
    LatentClip::new(frames, channels, grid, (0..n).map(|i| i as f32 * 0.5 - 3.0).collect()).unwrap()
}

#[test]
fn unit_patches_are_latent_pixels() {
    let c = clip(2, 1, 3);
    let t = patchify::<f64>(&c, 1, 1, None).unwrap();
    assert_eq!(t.shape(), &[18, 1]);
    for (a, b) in t.data().iter().zip(&c.values) {
        assert_eq!(*a, *b as f64);
    }
}

#[test]
fn patch_layout_places_values_by_hand() {
    let c = clip(2, 3, 16);
    let t = patchify::<f64>(&c, 2, 1, None).unwrap();
    assert_eq!(t.shape(), &[2 * 64, 12]);
    // Frame 1, patch row 3, patch col 5, channel 2, in-patch (1, 0).
    let token = 64 + 3 * 8 + 5;
    let elem = 2 * 4 + 1 * 2;
    let src = ((1 * 3 + 2) * 16 + 7) * 16 + 10;
    assert_eq!(t.data()[token * 12 + elem], c.values[src] as f64);
    let t2 = patchify::<f64>(&c, 2, 2, None).unwrap();
    assert_eq!(t2.shape(), &[64, 24]);
    assert_eq!(t2.numel(), c.values.len());
}

#[test]
fn patch_round_trip_through_a_signed_permutation() {
    let c = clip(2, 2, 4);
    let pd = patch_dim(2, 2, 1);
    let perm: Vec<usize> = (0..pd).map(|i| (i * 3 + 1) % pd).collect();
    let mut w = vec![0.0f64; pd * pd];
    for (i, &j) in perm.iter().enumerate() {
        w[i * pd + j] = if i % 2 == 0 { 1.0 } else { -1.0 };
    }
    let w = Tensor::new(vec![pd, pd], w).unwrap();
    let projected = patchify(&c, 2, 1, Some(&w)).unwrap();
    let wt: Vec<f64> = (0..pd * pd).map(|k| w.data()[(k % pd) * pd + k / pd]).collect();
    let back = project(&projected, &Tensor::new(vec![pd, pd], wt).unwrap()).unwrap();
    let out = unpatchify(&back, 2, 2, 4, 2, 1).unwrap();
    assert!(out.values.iter().zip(&c.values).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn patch_sizes_must_divide() {
    let c = clip(3, 1, 6);
    assert!(patchify::<f64>(&c, 4, 1, None).is_err());
    assert!(patchify::<f64>(&c, 2, 2, None).is_err());
    assert!(patchify::<f64>(&c, 0, 1, None).is_err());
}

/// Knows the pair behind every trajectory and emits the conditional field
/// that transports it along the straight path.
struct Oracle {
    x0: Vec<Vec<f64>>,
    x1: Vec<Vec<f64>>,
    sigma: f64,
    calls: Cell<usize>,
}

impl VelocityModel for Oracle {
    fn velocity(&self, x: &[Vec<f64>], _: &[&FlowCondition], t: f64, _: bool) -> Result<Vec<Vec<f64>>> {
        self.calls.set(self.calls.get() + 1);
        let a = 1.0 - (1.0 - self.sigma) * t;
        Ok(x.iter()
            .zip(&self.x1)
            .map(|(xi, x1)| xi.iter().zip(x1).map(|(&v, &d)| (d - (1.0 - self.sigma) * v) / a).collect())
            .collect())
    }
}

fn dummy_cond() -> FlowCondition {
    FlowCondition {
        past: clip(1, 1, 1),
        past_actions: ActionSequence::zeros(1, 1),
        future_actions: ActionSequence::zeros(1, 1),
    }
}

#[test]
fn one_euler_step_lands_on_the_straight_path_end() {
    let sigma = 1e-3;
    let x0 = draw_noise(5, 2, 16);
    let mut r = rng::seeded(9);
    let x1: Vec<Vec<f64>> = (0..2).map(|_| (0..16).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
    let oracle = Oracle { x0: x0.clone(), x1: x1.clone(), sigma, calls: Cell::new(0) };
    let cond = dummy_cond();
    let conds = [&cond, &cond];
    let g = GuidanceConfig { scale: 1.0, cond_drop_prob: 0.0 };
    let one = euler_integrate(&oracle, x0.clone(), &conds, 1, &g).unwrap();
    assert_eq!(oracle.calls.get(), 1);
    for i in 0..2 {
        let (_, vt) = interpolate(&oracle.x0[i], &x1[i], 0.0, sigma).unwrap();
        for j in 0..16 {
            assert_eq!(one[i][j].to_bits(), (x0[i][j] + vt[j]).to_bits());
            assert!((one[i][j] - (x1[i][j] + sigma * x0[i][j])).abs() < 1e-12);
        }
    }
    let fifty = euler_integrate(&oracle, x0.clone(), &conds, 50, &g).unwrap();
    for i in 0..2 {
        for j in 0..16 {
            assert!((fifty[i][j] - one[i][j]).abs() < 1e-9);
        }
    }
    oracle.calls.set(0);
    euler_integrate(&oracle, x0, &conds, 4, &GuidanceConfig::default()).unwrap();
    assert_eq!(oracle.calls.get(), 8);
}

struct Exploding;

impl VelocityModel for Exploding {
    fn velocity(&self, x: &[Vec<f64>], _: &[&FlowCondition], t: f64, _: bool) -> Result<Vec<Vec<f64>>> {
        let v = if t >= 0.5 { f64::NAN } else { 1.0 };
        Ok(x.iter().map(|xi| vec![v; xi.len()]).collect())
    }
}

#[test]
fn non_finite_velocity_aborts_with_the_step() {
    let cond = dummy_cond();
    let err = euler_sample(&Exploding, &[&cond], (1, 1, 2), 4, &GuidanceConfig::default(), 0).unwrap_err();
    assert!(matches!(err, HwmError::Integration { step: 2 }), "{err}");
    assert!(euler_integrate(&Exploding, vec![vec![0.0]], &[&cond], 0, &GuidanceConfig::default()).is_err());
}

fn tiny_world() -> WorldConfig {
    WorldConfig { grid: 4, vocab: 8, action_dim: 2, channels: 4, past_frames: 9, future_frames: 8, ..WorldConfig::default() }
}

fn tiny_cfg(variant: Variant) -> FlowConfig {
    FlowConfig {
        variant,
        layers: 2,
        dim: 16,
        heads: 2,
        mlp_hidden: 24,
        share_boundary: 1,
        time_dim: 8,
        freq_dim: 8,
        action_hidden: 12,
        ..FlowConfig::default()
    }
}

#[test]
fn zero_network_loss_matches_the_velocity_second_moment() {
    let world = tiny_world();
    let (net, layout) = FlowNet::new(&world, &tiny_cfg(Variant::Base)).unwrap();
    let store = ParamStore::<f32>::zeros(layout);
    let obj = FlowObjective::new(net).unwrap();
    let episodes: Vec<u64> = (0..256).collect();
    let b = obj.batch_from(&episodes, 3).unwrap();
    let mut tape = Tape::new();
    let loss = obj.net.loss(&mut Fwd::new(&mut tape, &store), &b, &obj.rope).unwrap();
    let loss = tape.value(loss).item() as f64;
    // Closed form: E[x1^2] from the clean data plus (1 - sigma)^2 per element.
    let mut sq = 0.0;
    let mut n = 0.0;
    for &s in &episodes {
        let (_, x1) = obj.episode(s).unwrap();
        sq += x1.iter().map(|v| v * v).sum::<f64>();
        n += x1.len() as f64;
    }
    let expected = sq / n + (1.0 - obj.net.cfg.sigma_min).powi(2);
    assert!((loss / expected - 1.0).abs() < 0.02, "{loss} vs {expected}");
}

#[test]
fn network_predicts_a_velocity_for_every_variant() {
    let world = tiny_world();
    for v in Variant::ALL {
        let (net, layout) = FlowNet::new(&world, &tiny_cfg(v)).unwrap();
        let mut store = ParamStore::<f32>::zeros(layout);
        init_weights(&mut store, &FlowNet::init_rules(), 1).unwrap();
        let runner = FlowRunner::new(&net, &store).unwrap();
        let obj = FlowObjective::new(net.clone()).unwrap();
        let (cond, _) = obj.episode(4).unwrap();
        let out = euler_sample(&runner, &[&cond, &cond], (net.future_frames(), 4, 4), 2, &GuidanceConfig::default(), 8).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].values.len(), 64);
        assert_ne!(out[0].values, out[1].values);
        assert!(out[0].values.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn network_gradients_match_finite_differences() {
    let world = tiny_world();
    for v in Variant::ALL {
        let (net, layout) = FlowNet::new(&world, &tiny_cfg(v)).unwrap();
        let mut store = ParamStore::<f64>::zeros(layout);
        init_weights(&mut store, &FlowNet::init_rules(), 2).unwrap();
        // Give the zero-initialized pieces some signal so every path is tested.
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get_mut(id);
            let mut r = rng::stream(7, "perturb", id.index() as u64);
            for x in t.data_mut() {
                *x += r.random_range(-0.3..0.3);
            }
        }
        let obj = FlowObjective::new(net.clone()).unwrap();
        let mut b = obj.batch_from(&[1, 2], 5).unwrap();
        b.drop = vec![false, true];
        let rope = net.rope::<f64>().unwrap();
        let opts = GradCheckOptions { max_entries_per_param: Some(3), ..GradCheckOptions::default() };
        let report = grad_check(&store, |s, t| net.loss(&mut Fwd::new(t, s), &b, &rope), &opts).unwrap();
        assert!(report.max_rel_err() <= 1e-4, "{v:?}: {}", report.max_rel_err());
    }
}

#[test]
fn fully_dropped_conditioning_is_ignored() {
    let world = tiny_world();
    let (net, layout) = FlowNet::new(&world, &tiny_cfg(Variant::Split)).unwrap();
    let mut store = ParamStore::<f32>::zeros(layout);
    init_weights(&mut store, &FlowNet::init_rules(), 3).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        let mut r = rng::stream(1, "perturb", id.index() as u64);
        for x in store.get_mut(id).data_mut() {
            *x += r.random_range(-0.1..0.1);
        }
    }
    let mut cfg = tiny_cfg(Variant::Split);
    cfg.guidance.cond_drop_prob = 1.0;
    let (net2, _) = FlowNet::new(&world, &cfg).unwrap();
    let obj = FlowObjective::new(net2).unwrap();
    let a = obj.batch_from(&[10], 4).unwrap();
    let mut b = obj.batch_from(&[11], 4).unwrap();
    assert_eq!(a.drop, vec![true]);
    assert_ne!(a.past, b.past);
    b.xt = a.xt.clone();
    b.t = a.t.clone();
    let run = |batch: &FlowBatch| {
        let mut tape = Tape::new();
        let out = net.forward(&mut Fwd::new(&mut tape, &store), batch, &net.rope().unwrap()).unwrap();
        tape.value(out).data().to_vec()
    };
    assert_eq!(run(&a), run(&b));
    b.drop = vec![false];
    assert_ne!(run(&a), run(&b));
}

#[test]
fn objective_batches_are_reproducible() {
    let world = tiny_world();
    let (net, _) = FlowNet::new(&world, &tiny_cfg(Variant::Base)).unwrap();
    let obj = FlowObjective::new(net).unwrap();
    let a = obj.make_batch(9, 3, 4).unwrap();
    assert_eq!(a, obj.make_batch(9, 3, 4).unwrap());
    assert_ne!(a, obj.make_batch(9, 4, 4).unwrap());
    assert!(a.t.iter().all(|t| (0.0..1.0).contains(t)));
}

#[test]
fn configs_reject_bad_patches() {
    let world = tiny_world();
    let cfg = FlowConfig { p_lw: 3, ..tiny_cfg(Variant::Base) };
    assert!(FlowNet::new(&world, &cfg).is_err());
    let cfg = FlowConfig { sample_steps: 0, ..tiny_cfg(Variant::Base) };
    assert!(FlowNet::new(&world, &cfg).is_err());
}
