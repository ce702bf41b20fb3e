use super::*;
use crate::bits::BitTensor;
use crate::network::tests::random_net;
use crate::network::{Layer, Shape3, WeightedParams};
use crate::training::ForwardMode;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Net whose output on input `[1.0]` is exactly `q`.
fn fixed_q_net(q: &[f32]) -> BinarizedNetwork {
    let signs: Vec<i8> = q.iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect();
    let bits = BitTensor::from_signs(&[q.len(), 1], &signs).unwrap();
    let scales = q.iter().map(|v| v.abs()).collect();
    let layers = vec![Layer::Dense { params: WeightedParams { bits, scales, latent: None } }];
    BinarizedNetwork::new(Shape3::flat(1), layers).unwrap()
}

fn transition(r: f64, done: bool) -> Transition {
    Transition { s: vec![1.0], a: 0, r, s_next: vec![1.0], done }
}

/// χ² statistic of observed counts against a uniform expectation.
fn chi_square(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
}

#[test]
fn catch_episode_length_and_reward_rule() {
    let mut env = Catch::new(10, 10, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        env.reset();
        let mut steps = 0;
        loop {
            let out = env.step(rng.random_range(0..3)).unwrap();
            steps += 1;
            let (row, col) = env.ball();
            assert_eq!(row, steps);
            assert_eq!(out.frame.get(row, col), [255; 3]);
            if out.done {
                let caught = col.abs_diff(env.paddle()) <= 1;
                assert_eq!(out.reward, if caught { 1.0 } else { -1.0 });
                break;
            }
            assert_eq!(out.reward, 0.0);
        }
        assert_eq!(steps, 9);
        assert!(matches!(env.step(1), Err(RlError::StepAfterDone)));
    }
}

#[test]
fn catch_paddle_under_ball_is_a_catch() {
    let mut env = Catch::new(6, 7, 5).unwrap();
    let mut caught = 0;
    for _ in 0..50 {
        env.reset();
        loop {
            let (target, paddle) = (env.ball().1.clamp(1, 5), env.paddle());
            let a = match target.cmp(&paddle) {
                std::cmp::Ordering::Less => 0,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Greater => 2,
            };
            let out = env.step(a).unwrap();
            if out.done {
                assert_eq!(env.ball().1.abs_diff(env.paddle()) <= 1, out.reward == 1.0);
                caught += (out.reward == 1.0) as usize;
                break;
            }
        }
    }
    assert_eq!(caught, 50);
}

#[test]
fn catch_random_policy_matches_monte_carlo_baseline() {
    // The paddle always covers 3 of 10 columns and the ball column is uniform
    // and independent of the paddle, so a random policy catches with p = 0.3.
    let mut env = Catch::new(10, 10, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 100_000;
    let mut catches = 0;
    for _ in 0..n {
        env.reset();
        loop {
            let out = env.step(rng.random_range(0..3)).unwrap();
            if out.done {
                catches += (out.reward > 0.0) as usize;
                break;
            }
        }
    }
    let p = catches as f64 / n as f64;
    let half_width = 4.0 * (0.3f64 * 0.7 / n as f64).sqrt();
    assert!((p - 0.3).abs() < half_width, "{p}");
}

#[test]
fn env_errors() {
    assert!(Catch::new(4, 10, 0).is_err());
    assert!(Gridworld::new(10, 3, 0).is_err());
    let mut env = Catch::new(5, 5, 0).unwrap();
    assert!(matches!(env.step(3), Err(RlError::InvalidAction { action: 3, actions: 3 })));
    assert_eq!(EnvSpec::parse("catch").unwrap(), EnvSpec::Catch { height: 10, width: 10 });
    assert_eq!(EnvSpec::parse("gridworld:6x8").unwrap(), EnvSpec::Gridworld { height: 6, width: 8 });
    assert!(EnvSpec::parse("pong").is_err());
    assert!(EnvSpec::parse("catch:3x3").is_err());
    assert!(EnvSpec::parse("catch:ax3").is_err());
}

#[test]
fn gridworld_goal_hazard_and_limit() {
    let mut env = Gridworld::new(5, 5, 0).unwrap();
    // Walk to the gap row, through the wall, then to the goal corner.
    let start = env.reset();
    let row = (0..5).find(|&r| start.get(r, 0) == [255, 0, 0]).unwrap();
    let mut path = Vec::new();
    path.extend(std::iter::repeat_n(if row < 2 { 1 } else { 0 }, row.abs_diff(2)));
    path.extend([3, 3, 3, 3, 1, 1]);
    let mut last = None;
    for a in path {
        let out = env.step(a).unwrap();
        if out.done {
            last = Some(out.reward);
            break;
        }
    }
    assert_eq!(last, Some(1.0));

    // Straight right from a non-gap row hits the hazard wall.
    loop {
        let f = env.reset();
        if f.get(2, 0) != [255, 0, 0] {
            break;
        }
    }
    env.step(3).unwrap();
    let out = env.step(3).unwrap();
    assert!(out.done);
    assert_eq!(out.reward, -1.0);

    env.reset();
    let mut n = 0;
    loop {
        n += 1;
        if env.step(2).unwrap().done {
            break;
        }
    }
    assert_eq!(n, env.step_limit());
}

#[test]
fn preprocess_examples() {
    let white = Frame { height: 3, width: 4, pixels: vec![255; 36] };
    assert!(preprocess(&[white.clone()], 3, 4).unwrap().iter().all(|&v| v == 1.0));

    let mut env = Catch::new(10, 10, 3).unwrap();
    let f0 = env.reset();
    let s = preprocess(&[f0.clone()], 10, 10).unwrap();
    assert_eq!(s.len(), 10 * 10 * 4);
    for px in s.chunks(4) {
        assert!(px.iter().all(|&v| v == px[0]));
    }
    // Identity resize: channel values are the pixel luma.
    for r in 0..10 {
        for c in 0..10 {
            let want = if f0.get(r, c) == [255; 3] { 1.0 } else { 0.0 };
            assert_eq!(s[(r * 10 + c) * 4 + 3], want);
        }
    }

    let bad = Frame { height: 2, width: 2, pixels: vec![0; 5] };
    assert!(matches!(preprocess(&[bad], 2, 2), Err(RlError::MalformedFrame(_))));
    assert!(preprocess(&[], 2, 2).is_err());
}

#[test]
fn preprocessor_stack_drops_oldest() {
    let frame = |v: u8| Frame { height: 1, width: 1, pixels: vec![v; 3] };
    let mut pre = Preprocessor::new(1, 1);
    let lum = |v: u8| (v as f64 / 255.0) as f32;
    assert_eq!(pre.reset(&frame(10)).unwrap(), vec![lum(10); 4]);
    pre.push(&frame(20)).unwrap();
    pre.push(&frame(30)).unwrap();
    pre.push(&frame(40)).unwrap();
    let s = pre.push(&frame(50)).unwrap();
    assert_eq!(s, vec![lum(20), lum(30), lum(40), lum(50)]);
    let frames: Vec<Frame> = [10, 20, 30, 40, 50].map(frame).to_vec();
    assert_eq!(preprocess(&frames, 1, 1).unwrap(), s);
    assert_eq!(preprocess(&frames[..2], 1, 1).unwrap(), vec![lum(10), lum(10), lum(10), lum(20)]);
}

#[test]
fn downsampling_averages_blocks() {
    // 4x4 → 2x2: each output is the mean of a 2x2 block.
    let mut f = Frame::black(4, 4);
    let vals = [0u8, 51, 102, 153, 204, 255, 0, 51, 102, 153, 204, 255, 0, 51, 102, 153];
    for (i, &v) in vals.iter().enumerate() {
        f.set(i / 4, i % 4, [v; 3]);
    }
    let s = preprocess(&[f], 2, 2).unwrap();
    for (o, (by, bx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
        let mut acc = 0.0;
        for y in 0..2 {
            for x in 0..2 {
                acc += vals[(2 * by + y) * 4 + 2 * bx + x] as f64 / 255.0;
            }
        }
        assert!((s[o * 4] as f64 - acc / 4.0).abs() < 1e-6);
    }
}

#[test]
fn select_action_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = fixed_q_net(&[0.1, 0.9, 0.3]);
    assert_eq!(select_action(&net, &[1.0], 0.0, &mut rng).unwrap(), 1);
    let tie = fixed_q_net(&[0.5, 0.5]);
    assert_eq!(select_action(&tie, &[1.0], 0.0, &mut rng).unwrap(), 0);

    let mut counts = [0usize; 3];
    for _ in 0..10_000 {
        counts[select_action(&net, &[1.0], 1.0, &mut rng).unwrap()] += 1;
    }
    // χ² with 2 degrees of freedom; 13.8 is the 0.999 quantile.
    assert!(chi_square(&counts) < 13.8, "{counts:?}");
    assert!(select_action(&net, &[1.0], 1.5, &mut rng).is_err());
}

#[test]
fn compute_target_examples() {
    let target = fixed_q_net(&[1.0, 0.5]).to_full_precision(WeightSource::Signs).unwrap();
    assert_eq!(compute_target(&target, &transition(1.0, true), 0.99).unwrap(), 1.0);
    assert_eq!(compute_target(&target, &transition(-1.0, false), 0.0).unwrap(), -1.0);
    let y = compute_target(&target, &transition(0.0, false), 0.99).unwrap();
    assert!((y - 0.99).abs() < 1e-12);
}

#[test]
fn sync_modes_copy_the_right_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let value = random_net(&mut rng);
        let x: Vec<f32> = (0..value.input_shape().len()).map(|_| rng.random_range(0.0..1.0)).collect();

        let mut target = value.to_full_precision(WeightSource::Signs).unwrap();
        sync_target(&value, &mut target, SyncMode::FullPrecision).unwrap();
        assert_eq!(target.forward(&x).unwrap(), value.to_full_precision(WeightSource::Latents).unwrap().forward(&x).unwrap());
        let once = target.clone();
        sync_target(&value, &mut target, SyncMode::FullPrecision).unwrap();
        assert_eq!(target, once);

        sync_target(&value, &mut target, SyncMode::BinarizedAblation).unwrap();
        for (a, b) in target.forward(&x).unwrap().iter().zip(value.forward(&x).unwrap()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }
    let a = random_net(&mut rng);
    let mut b = fixed_q_net(&[1.0]).to_full_precision(WeightSource::Signs).unwrap();
    assert!(matches!(sync_target(&a, &mut b, SyncMode::FullPrecision), Err(RlError::ArchitectureMismatch)));
}

#[test]
fn replay_keeps_last_capacity_and_samples_uniformly() {
    let mut buf = ReplayBuffer::new(50).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    assert!(buf.sample(1, &mut rng).is_err());
    for i in 0..130 {
        buf.push(Transition { s: vec![i as f32], a: 0, r: 0.0, s_next: vec![], done: false }).unwrap();
    }
    assert_eq!(buf.len(), 50);
    for i in 0..50 {
        assert_eq!(buf.get(i).unwrap().s[0], (80 + i) as f32);
    }
    let mut counts = vec![0usize; 50];
    for _ in 0..2000 {
        for i in buf.sample_indices(32, &mut rng).unwrap() {
            counts[i] += 1;
        }
    }
    // χ² with 49 degrees of freedom; 85.4 is the 0.999 quantile.
    assert!(chi_square(&counts) < 85.4);
    assert!(buf.push(transition(0.5, false)).is_err());
    assert!(ReplayBuffer::new(0).is_err());
}

#[test]
fn epsilon_schedule_closed_form() {
    let s = EpsilonSchedule { start: 1.0, end: 0.1, decay_steps: 1000 };
    assert_eq!(s.value(0), 1.0);
    assert_eq!(s.value(500), 1.0 + (0.1 - 1.0) * 0.5);
    assert_eq!(s.value(1000), 0.1);
    assert_eq!(s.value(10_000), 0.1);
    let mut prev = f64::INFINITY;
    for t in (0..2000).step_by(7) {
        let v = s.value(t);
        assert_eq!(v, if t >= 1000 { 0.1 } else { 1.0 - 0.9 * t as f64 / 1000.0 });
        assert!(v <= prev);
        prev = v;
    }
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        env: EnvSpec::Catch { height: 6, width: 6 },
        seed,
        max_steps: 600,
        prefill: 100,
        batch_size: 8,
        sync_every: 50,
        buffer_capacity: 500,
        epsilon: EpsilonSchedule { start: 1.0, end: 0.1, decay_steps: 300 },
        wall_clock: false,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_episodes_returns_initial_network() {
    let mut cfg = small_config(1);
    cfg.episodes = 0;
    let out = train(&cfg).unwrap();
    assert!(out.metrics.is_empty());
    let mut init_rng = ChaCha8Rng::seed_from_u64(1);
    init_rng.set_stream(2);
    let specs = cfg.preset.layers(cfg.input_shape(), 3).unwrap();
    let fresh = BinarizedNetwork::random(cfg.input_shape(), &specs, cfg.init, &mut init_rng).unwrap();
    assert_eq!(out.network, fresh);
}

#[test]
fn training_is_deterministic() {
    let a = train(&small_config(3)).unwrap();
    let b = train(&small_config(3)).unwrap();
    assert!(!a.metrics.is_empty());
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.network.fingerprint(), b.network.fingerprint());
    let c = train(&small_config(4)).unwrap();
    assert_ne!(a.network.fingerprint(), c.network.fingerprint());
}

#[test]
fn target_is_frozen_between_syncs() {
    let mut cfg = small_config(5);
    cfg.sync_every = 1_000_000;
    let out = train(&cfg).unwrap();
    let mut zero = cfg.clone();
    zero.episodes = 0;
    let initial = train(&zero).unwrap();
    assert_eq!(out.target, initial.target);
    assert_ne!(out.network.fingerprint(), initial.network.fingerprint());
}

#[test]
fn surrogate_forward_mode_trains() {
    let mut cfg = small_config(6);
    cfg.forward_mode = ForwardMode::Surrogate;
    let out = train(&cfg).unwrap();
    assert!(out.metrics.iter().all(|m| m.loss_mean.is_finite()));
}

#[test]
fn metrics_and_checkpoints_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(7);
    cfg.out_dir = Some(dir.path().to_path_buf());
    cfg.checkpoint_every = 20;
    let out = train(&cfg).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    assert_eq!(lines.count(), out.metrics.len());
    assert!(csv.ends_with('\n') && !csv.contains('\r'));
    let last = out.metrics.last().unwrap();
    assert!(last.steps <= cfg.max_steps);
    assert_eq!(last.wall_ms, 0);
    let model = crate::network::decode(&std::fs::read(dir.path().join("model.bqn")).unwrap()).unwrap();
    assert_eq!(model.network, out.network);
    assert_eq!(model.optimizer.unwrap(), out.optimizer.to_section());
    assert!(dir.path().join("checkpoint_000020.bqn").exists());
}

#[test]
fn invalid_configs_are_rejected() {
    let base = small_config(0);
    let cases: Vec<Box<dyn Fn(&mut TrainConfig)>> = vec![
        Box::new(|c| c.gamma = 1.0),
        Box::new(|c| c.batch_size = 0),
        Box::new(|c| c.buffer_capacity = 4),
        Box::new(|c| c.epsilon.end = 2.0),
        Box::new(|c| c.optimizer.learning_rate = 0.0),
        Box::new(|c| c.init.latent_range = 0.0),
    ];
    for f in cases {
        let mut c = base.clone();
        f(&mut c);
        assert!(matches!(train(&c), Err(RlError::Config(_))));
    }
}

#[test]
fn evaluation_is_reproducible_and_random_policy_near_baseline() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spec = EnvSpec::Catch { height: 10, width: 10 };
    let shape = Shape3::new(10, 10, 4);
    let specs = crate::network::presets::Preset::BqnSmall.layers(shape, 3).unwrap();
    let net = BinarizedNetwork::random(shape, &specs, Default::default(), &mut rng).unwrap();
    let opts = EvalOptions { episodes: 50, epsilon: 0.0, seed: 1, ..Default::default() };
    let a = evaluate(&net, &spec, &opts).unwrap();
    let b = evaluate(&net, &spec, &opts).unwrap();
    assert_eq!(a, b);

    let random = evaluate(&net, &spec, &EvalOptions { episodes: 4000, epsilon: 1.0, seed: 2, record: true, ..Default::default() }).unwrap();
    assert!((random.success_rate() - 0.3).abs() < 0.03, "{}", random.success_rate());
    assert!((random.mean - (2.0 * random.success_rate() - 1.0)).abs() < 1e-12);
    assert_eq!(random.recorded.len(), 4000 * 9);

    assert!(evaluate(&net, &EnvSpec::Catch { height: 8, width: 8 }, &opts).is_err());
    assert!(evaluate(&net, &spec, &EvalOptions { episodes: 0, ..opts }).is_err());
}
