use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::env::{EnvSpec, Environment, Step};
use super::preprocess::{Preprocessor, STACK};
use super::{clip_reward, compute_target, select_action, sync_target, EpsilonSchedule, ReplayBuffer, SyncMode, Transition};
use crate::error::{RlError, TrainError};
use crate::network::presets::Preset;
use crate::network::{serialize_with, BinarizedNetwork, FullPrecisionNetwork, InitOptions, SaveOptions, Shape3};
use crate::training::{loss, ForwardMode, Gradients, RmsProp, RmsPropConfig, TrainingView};

pub const METRICS_HEADER: &str = "episode,steps,return_raw,return_clipped,epsilon,loss_mean,wall_ms";

pub fn metrics_csv_header() -> &'static str {
    METRICS_HEADER
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub env: EnvSpec,
    pub preset: Preset,
    pub seed: u64,
    /// Upper bound on training episodes.
    pub episodes: usize,
    /// Upper bound on environment steps, prefill included.
    pub max_steps: usize,
    pub gamma: f64,
    /// Target sync period C, in agent steps.
    pub sync_every: usize,
    pub buffer_capacity: usize,
    /// Random-action transitions stored before learning starts.
    pub prefill: usize,
    pub batch_size: usize,
    /// One gradient step every this many agent steps.
    pub train_every: usize,
    pub epsilon: EpsilonSchedule,
    pub optimizer: RmsPropConfig,
    pub frame_skip: usize,
    pub sync_mode: SyncMode,
    pub forward_mode: ForwardMode,
    pub init: InitOptions,
    /// Checkpoint period in episodes; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Where metrics.csv, checkpoints and model.bqn go.
    pub out_dir: Option<PathBuf>,
    /// When false, `wall_ms` is written as 0 so metrics files are reproducible.
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            env: EnvSpec::Catch { height: 10, width: 10 },
            preset: Preset::BqnSmall,
            seed: 0,
            episodes: 1_000_000,
            max_steps: 200_000,
            gamma: 0.99,
            sync_every: 1000,
            buffer_capacity: 50_000,
            prefill: 5_000,
            batch_size: 32,
            train_every: 1,
            epsilon: EpsilonSchedule { start: 1.0, end: 0.1, decay_steps: 50_000 },
            optimizer: RmsPropConfig::default(),
            frame_skip: 1,
            sync_mode: SyncMode::FullPrecision,
            forward_mode: ForwardMode::Binary,
            init: InitOptions::default(),
            checkpoint_every: 0,
            out_dir: None,
            wall_clock: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::Config(m.into()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.sync_every == 0 || self.train_every == 0 || self.frame_skip == 0 {
            return bad("batch_size, sync_every, train_every and frame_skip must be positive");
        }
        if self.buffer_capacity < self.batch_size {
            return bad("buffer_capacity must be at least batch_size");
        }
        let e = self.epsilon;
        if !(0.0..=1.0).contains(&e.start) || !(0.0..=1.0).contains(&e.end) || e.end > e.start {
            return bad("epsilon must decay within [0, 1]");
        }
        let o = self.optimizer;
        if !(o.learning_rate > 0.0 && (0.0..1.0).contains(&o.decay) && o.epsilon > 0.0) {
            return bad("optimizer needs learning_rate > 0, decay in [0, 1), epsilon > 0");
        }
        if !(self.init.latent_range > 0.0 && self.init.latent_range <= 1.0 && self.init.shift_gain > 0.0) {
            return bad("latent_range must lie in (0, 1] and shift_gain be positive");
        }
        Ok(())
    }

    pub fn input_shape(&self) -> Shape3 {
        let (EnvSpec::Catch { height, width } | EnvSpec::Gridworld { height, width }) = self.env;
        Shape3::new(height, width, STACK)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMetrics {
    pub episode: usize,
    /// Cumulative environment steps at the end of the episode.
    pub steps: usize,
    pub return_raw: f64,
    pub return_clipped: f64,
    pub epsilon: f64,
    /// Mean minibatch loss over the episode's gradient steps (0 if none).
    pub loss_mean: f64,
    pub wall_ms: u64,
}

impl EpisodeMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.episode, self.steps, self.return_raw, self.return_clipped, self.epsilon, self.loss_mean, self.wall_ms
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: BinarizedNetwork,
    pub target: FullPrecisionNetwork,
    pub optimizer: RmsProp,
    pub metrics: Vec<EpisodeMetrics>,
    pub steps: usize,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Repeats `action` up to `k` times, summing rewards and stopping at episode end.
fn skip_step(env: &mut dyn Environment, action: usize, k: usize) -> Result<Step, RlError> {
    let mut out = env.step(action)?;
    for _ in 1..k {
        if out.done {
            break;
        }
        let next = env.step(action)?;
        out = Step { frame: next.frame, reward: out.reward + next.reward, done: next.done };
    }
    Ok(out)
}

fn save(net: &BinarizedNetwork, opt: &RmsProp, path: &Path) -> Result<(), RlError> {
    let section = opt.to_section();
    fs::write(path, serialize_with(net, &SaveOptions { include_latents: true, optimizer: Some(&section) }))?;
    Ok(())
}

/// One gradient step on a uniform minibatch; returns the minibatch loss.
fn learn(
    net: &mut BinarizedNetwork,
    target: &FullPrecisionNetwork,
    opt: &mut RmsProp,
    buffer: &ReplayBuffer,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64, RlError> {
    let batch = buffer.sample(config.batch_size, rng)?;
    let grads = {
        let view = TrainingView::new(net, config.forward_mode)?;
        let mut q_taken = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        let mut tapes = Vec::with_capacity(batch.len());
        for t in &batch {
            targets.push(compute_target(target, t, config.gamma)?);
            let (q, tape) = view.forward(&t.s)?;
            q_taken.push(q[t.a]);
            tapes.push(tape);
        }
        let (value, dq) = loss(&q_taken, &targets)?;
        if !value.is_finite() {
            return Err(TrainError::NonFiniteGradient.into());
        }
        let mut grads = Gradients::zeros_like(net);
        let mut out_grad = vec![0.0; net.output_dim()];
        for ((t, tape), g) in batch.iter().zip(tapes).zip(dq) {
            out_grad.iter_mut().for_each(|v| *v = 0.0);
            out_grad[t.a] = g;
            view.backward(tape, &out_grad, &mut grads)?;
        }
        (grads, value)
    };
    opt.step(net, &grads.0)?;
    Ok(grads.1)
}

/// Runs binary Q-learning: random prefill, then ε-greedy episodes with a
/// minibatch update every `train_every` steps and a target sync every
/// `sync_every` steps. Stops after `episodes` episodes or `max_steps`
/// environment steps; a partially played final episode is not logged.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome, RlError> {
    config.validate()?;
    let started = Instant::now();
    let wall = |cfg: &TrainConfig| if cfg.wall_clock { started.elapsed().as_millis() as u64 } else { 0 };
    let env_seed = rng_stream(config.seed, 3).random::<u64>();
    let mut env = config.env.build(env_seed)?;
    let mut agent_rng = rng_stream(config.seed, 1);
    let mut init_rng = rng_stream(config.seed, 2);

    let input = config.input_shape();
    let specs = config.preset.layers(input, env.action_count())?;
    let mut net = BinarizedNetwork::random(input, &specs, config.init, &mut init_rng)?;
    let mut target = net.to_full_precision(config.sync_mode.weight_source())?;
    let mut opt = RmsProp::new(&net, config.optimizer);
    let mut buffer = ReplayBuffer::new(config.buffer_capacity)?;
    let mut pre = Preprocessor::new(input.h, input.w);

    let mut csv = match &config.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut f = fs::File::create(dir.join("metrics.csv"))?;
            writeln!(f, "{METRICS_HEADER}")?;
            Some(f)
        }
        None => None,
    };

    let mut steps = 0usize;
    let mut state = pre.reset(&env.reset())?;
    while buffer.len() < config.prefill && steps < config.max_steps {
        let a = agent_rng.random_range(0..env.action_count());
        let out = skip_step(env.as_mut(), a, config.frame_skip)?;
        let next = pre.push(&out.frame)?;
        buffer.push(Transition { s: state, a, r: clip_reward(out.reward), s_next: next.clone(), done: out.done })?;
        steps += 1;
        state = if out.done { pre.reset(&env.reset())? } else { next };
    }

    let mut metrics = Vec::new();
    let mut agent_steps = 0usize;
    'episodes: for episode in 1..=config.episodes {
        if steps >= config.max_steps {
            break;
        }
        let mut state = pre.reset(&env.reset())?;
        let (mut ret_raw, mut ret_clip) = (0.0, 0.0);
        let (mut loss_sum, mut loss_count) = (0.0, 0usize);
        loop {
            if steps >= config.max_steps {
                break 'episodes;
            }
            let eps = config.epsilon.value(agent_steps);
            let a = select_action(&net, &state, eps, &mut agent_rng)?;
            let out = skip_step(env.as_mut(), a, config.frame_skip)?;
            let next = pre.push(&out.frame)?;
            let r = clip_reward(out.reward);
            ret_raw += out.reward;
            ret_clip += r;
            buffer.push(Transition { s: std::mem::take(&mut state), a, r, s_next: next.clone(), done: out.done })?;
            steps += 1;
            agent_steps += 1;

            if agent_steps % config.train_every == 0 && buffer.len() >= config.batch_size {
                match learn(&mut net, &target, &mut opt, &buffer, config, &mut agent_rng) {
                    Ok(l) => {
                        loss_sum += l;
                        loss_count += 1;
                    }
                    Err(RlError::Train(TrainError::NonFiniteGradient)) => {
                        let checkpoint = match &config.out_dir {
                            Some(dir) => {
                                let path = dir.join("diverged.bqn");
                                save(&net, &opt, &path)?;
                                Some(path)
                            }
                            None => None,
                        };
                        return Err(RlError::Diverged { episode, step: steps, checkpoint });
                    }
                    Err(e) => return Err(e),
                }
            }
            if agent_steps % config.sync_every == 0 {
                sync_target(&net, &mut target, config.sync_mode)?;
            }
            if out.done {
                break;
            }
            state = next;
        }
        let row = EpisodeMetrics {
            episode,
            steps,
            return_raw: ret_raw,
            return_clipped: ret_clip,
            epsilon: config.epsilon.value(agent_steps),
            loss_mean: if loss_count > 0 { loss_sum / loss_count as f64 } else { 0.0 },
            wall_ms: wall(config),
        };
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{}", row.csv_row())?;
        }
        metrics.push(row);
        if let Some(dir) = &config.out_dir {
            if config.checkpoint_every > 0 && episode % config.checkpoint_every == 0 {
                save(&net, &opt, &dir.join(format!("checkpoint_{episode:06}.bqn")))?;
            }
        }
    }
    if let Some(dir) = &config.out_dir {
        save(&net, &opt, &dir.join("model.bqn"))?;
    }
    Ok(TrainOutcome { network: net, target, optimizer: opt, metrics, steps })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub episodes: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub frame_skip: usize,
    /// Keep every state the policy acted on.
    pub record: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { episodes: 100, epsilon: 0.05, seed: 0, frame_skip: 1, record: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean: f64,
    /// Population standard deviation of episode returns.
    pub std: f64,
    pub returns: Vec<f64>,
    pub recorded: Vec<Vec<f32>>,
}

impl EvalReport {
    /// Fraction of episodes with positive return.
    pub fn success_rate(&self) -> f64 {
        self.returns.iter().filter(|&&r| r > 0.0).count() as f64 / self.returns.len() as f64
    }
}

/// Runs `episodes` ε-greedy episodes and reports unclipped returns.
pub fn evaluate(net: &BinarizedNetwork, env: &EnvSpec, opts: &EvalOptions) -> Result<EvalReport, RlError> {
    if opts.episodes == 0 {
        return Err(RlError::Config("evaluation needs at least one episode".into()));
    }
    if opts.frame_skip == 0 {
        return Err(RlError::Config("frame_skip must be positive".into()));
    }
    let input = net.input_shape();
    let (EnvSpec::Catch { height, width } | EnvSpec::Gridworld { height, width }) = *env;
    let expected = Shape3::new(height, width, STACK);
    if input != expected || net.output_dim() != env.action_count() {
        return Err(RlError::InvalidEnv(format!(
            "network takes {input} with {} actions, {} needs {expected} with {}",
            net.output_dim(),
            env.name(),
            env.action_count()
        )));
    }
    let mut environment = env.build(rng_stream(opts.seed, 3).random::<u64>())?;
    let mut rng = rng_stream(opts.seed, 1);
    let mut pre = Preprocessor::new(input.h, input.w);
    let mut returns = Vec::with_capacity(opts.episodes);
    let mut recorded = Vec::new();
    for _ in 0..opts.episodes {
        let mut state = pre.reset(&environment.reset())?;
        let mut ret = 0.0;
        loop {
            let a = select_action(net, &state, opts.epsilon, &mut rng)?;
            let out = skip_step(environment.as_mut(), a, opts.frame_skip)?;
            ret += out.reward;
            let next = pre.push(&out.frame)?;
            if opts.record {
                recorded.push(std::mem::take(&mut state));
            }
            if out.done {
                break;
            }
            state = next;
        }
        returns.push(ret);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(EvalReport { mean, std, returns, recorded })
}
