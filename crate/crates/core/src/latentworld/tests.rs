use proptest::prelude::*;

use super::*;

fn cfg() -> WorldConfig {
    WorldConfig::default()
}

#[test]
fn default_frame_counts_map_to_two_past_one_future_latent() {
    let c = cfg();
    assert_eq!(c.past_latent_frames(), 2);
    assert_eq!(c.future_latent_frames(), 1);
    let ep = gen_episode(3, &c).unwrap();
    assert_eq!(ep.past_tokens.frames, 2);
    assert_eq!(ep.future_tokens.frames, 1);
    assert_eq!(ep.past_actions.frames, 9);
    assert_eq!(ep.future_actions.frames, 8);
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        WorldConfig { grid: 3, ..cfg() },
        WorldConfig { vocab: 6, ..cfg() },
        WorldConfig { past_frames: 8, ..cfg() },
        WorldConfig { future_frames: 4, ..cfg() },
    ] {
        assert!(matches!(gen_episode(1, &bad), Err(HwmError::Config(_))));
    }
}

#[test]
fn zero_actions_keep_the_sprite_still() {
    let c = cfg();
    let ep = gen_episode_with(11, &c, &ActionPolicy::Zero).unwrap();
    assert_eq!(ep.future_tokens.frame(0), ep.past_tokens.frame(1));
    let again = oracle_future(&ep.past_tokens, &ActionSequence::zeros(1, c.action_dim), &c, 11).unwrap();
    assert_eq!(again.frame(0), ep.past_tokens.frame(1));
}

#[test]
fn same_seed_is_bit_identical() {
    let c = cfg();
    assert_eq!(gen_episode(42, &c).unwrap(), gen_episode(42, &c).unwrap());
    assert_ne!(gen_episode(42, &c).unwrap(), gen_episode(43, &c).unwrap());
}

/// Independent replay of the world rule from the generator's leading frame.
fn replay_positions(start: (usize, usize), moves: &[(i32, i32)], g: usize) -> Vec<(usize, usize)> {
    let mut out = vec![start];
    let mut p = (start.0 as i32, start.1 as i32);
    for &(dx, dy) in moves {
        p = ((p.0 + dx).rem_euclid(g as i32), (p.1 + dy).rem_euclid(g as i32));
        out.push((p.0 as usize, p.1 as usize));
    }
    out
}

#[test]
fn rightward_action_advances_x_by_one_per_latent_frame() {
    let c = WorldConfig { past_frames: 25, future_frames: 24, ..cfg() };
    let ep = gen_episode_with(5, &c, &ActionPolicy::Constant(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
    let all = ep.past_tokens.concat(&ep.future_tokens);
    let start = locate_sprite(all.frame(0), c.grid, c.vocab).unwrap();
    let want = replay_positions(start, &[(1, 0); 5], c.grid);
    for (k, pos) in want.iter().enumerate() {
        assert_eq!(locate_sprite(all.frame(k), c.grid, c.vocab).unwrap(), *pos, "frame {k}");
        // Sprite id is s/2 + |q(a)|_1 = 33.
        assert_eq!(all.at(k, pos.1, pos.0), 33);
    }
}

#[test]
fn oracle_composes_over_frames() {
    let c = WorldConfig { future_frames: 16, ..cfg() };
    let ep = gen_episode(9, &c).unwrap();
    let acts = ep.future_latent_actions(&c);
    let both = oracle_future(&ep.past_tokens, &acts, &c, 9).unwrap();
    assert_eq!(both, ep.future_tokens);
    let first = oracle_future(&ep.past_tokens, &ActionSequence::new(1, c.action_dim, acts.row(0).to_vec()).unwrap(), &c, 9).unwrap();
    let extended = ep.past_tokens.concat(&first);
    let second = oracle_future(&extended, &ActionSequence::new(1, c.action_dim, acts.row(1).to_vec()).unwrap(), &c, 9).unwrap();
    assert_eq!(first.concat(&second), both);
}

#[test]
fn tokens_stay_below_vocab_and_actions_in_range() {
    let c = cfg();
    for seed in 0..50 {
        let ep = gen_episode(seed, &c).unwrap();
        assert!(ep.past_tokens.tokens.iter().chain(&ep.future_tokens.tokens).all(|&t| t < c.mask_id()));
        assert!(ep.past_actions.values.iter().chain(&ep.future_actions.values).all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn embedding_without_jitter_is_exact_lookup() {
    let c = cfg();
    let cb = Codebook::new(c.vocab, c.channels, 1).unwrap();
    let grid = TokenGrid::new(1, 4, 64, vec![7; 16]).unwrap();
    let mut r = rng::seeded(0);
    let clip = embed_tokens(&grid, &cb, 0.0, &mut r).unwrap();
    for ch in 0..c.channels {
        for i in 0..16 {
            assert_eq!(clip.values[ch * 16 + i], cb.row(7)[ch]);
        }
    }
    let bad = TokenGrid { frames: 1, grid: 4, vocab: 64, tokens: vec![64; 16] };
    assert!(matches!(embed_tokens(&bad, &cb, 0.0, &mut r), Err(HwmError::TokenOutOfRange { .. })));
}

#[test]
fn jittered_round_trip_recovers_every_token() {
    let c = cfg();
    let cb = Codebook::new(c.vocab, c.channels, 2).unwrap();
    assert!(cb.min_distance() >= 1.0);
    for seed in 0..20 {
        let mut ep = gen_episode(seed, &c).unwrap();
        attach_latents(&mut ep, &cb, 0.01).unwrap();
        // Oracle: brute-force nearest row, written independently of `quantize`.
        let clip = ep.future_latents.as_ref().unwrap();
        let cells = c.cells();
        for i in 0..cells {
            let v: Vec<f32> = (0..c.channels).map(|ch| clip.values[ch * cells + i]).collect();
            let best = (0..c.vocab)
                .min_by(|&a, &b| {
                    let da: f32 = cb.row(a).iter().zip(&v).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f32 = cb.row(b).iter().zip(&v).map(|(x, y)| (x - y).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(best as u32, ep.future_tokens.frame(0)[i]);
        }
        assert_eq!(quantize(clip, &cb).unwrap(), ep.future_tokens);
    }
}

#[test]
fn episode_file_round_trips() {
    let c = cfg();
    let cb = Codebook::new(c.vocab, c.channels, 3).unwrap();
    let mut ep = gen_episode(77, &c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ep.hwm");
    write_episode(&path, &ep).unwrap();
    assert_eq!(read_episode(&path).unwrap(), ep);
    attach_latents(&mut ep, &cb, 0.01).unwrap();
    let bytes = encode_episode(&ep).unwrap();
    assert_eq!(&bytes[..4], b"HWM1");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 8);
    assert_eq!(decode_episode(&bytes).unwrap(), ep);
    assert!(decode_episode(&bytes[..bytes.len() - 1]).is_err());
    let png = dir.path().join("ep.png");
    write_token_png(&png, &[&ep.past_tokens, &ep.future_tokens], 4).unwrap();
    assert!(std::fs::metadata(&png).unwrap().len() > 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generator_agrees_with_oracle(seed in any::<u64>()) {
        let c = WorldConfig { future_frames: 16, ..cfg() };
        let ep = gen_episode(seed, &c).unwrap();
        let o = oracle_future(&ep.past_tokens, &ep.future_latent_actions(&c), &c, seed).unwrap();
        prop_assert_eq!(o, ep.future_tokens);
    }

    #[test]
    fn changing_actions_moves_the_sprite_as_the_rule_says(seed in any::<u64>(), ax in -1.0f32..1.0, ay in -1.0f32..1.0) {
        let c = cfg();
        let ep = gen_episode(seed, &c).unwrap();
        let acts = ActionSequence::new(1, 4, vec![ax, ay, 0.0, 0.0]).unwrap();
        let fut = oracle_future(&ep.past_tokens, &acts, &c, seed).unwrap();
        let last = locate_sprite(ep.past_tokens.frame(1), c.grid, c.vocab).unwrap();
        let q = |a: f32| if a > 0.4 { 1 } else if a < -0.4 { -1 } else { 0 };
        let want = replay_positions(last, &[(q(ax), q(ay))], c.grid)[1];
        prop_assert_eq!(locate_sprite(fut.frame(0), c.grid, c.vocab).unwrap(), want);
        let id = 32 + (q(ax).abs() + q(ay).abs()) as u32;
        prop_assert_eq!(fut.at(0, want.1, want.0), id);
    }
}
