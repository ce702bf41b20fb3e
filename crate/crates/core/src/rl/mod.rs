//! Binary Q-learning: environments, preprocessing, replay, ε-greedy control,
//! full-precision targets, and the training and evaluation loops.

pub mod env;
mod preprocess;
mod train;

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{BnnError, RlError};
use crate::network::{argmax, BinarizedNetwork, FullPrecisionNetwork, WeightSource};

pub use env::{Catch, EnvSpec, Environment, Frame, Gridworld, Step};
pub use preprocess::{preprocess, Preprocessor, STACK};
pub use train::{evaluate, metrics_csv_header, train, EpisodeMetrics, EvalOptions, EvalReport, TrainConfig, TrainOutcome, METRICS_HEADER};

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f32>,
    pub a: usize,
    /// Clipped reward in {−1, 0, +1}.
    pub r: f64,
    pub s_next: Vec<f32>,
    pub done: bool,
}

/// Maps a raw reward to its sign, with 0 kept as 0.
pub fn clip_reward(r: f64) -> f64 {
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Fixed-capacity FIFO store sampled uniformly with replacement.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self, RlError> {
        if capacity == 0 {
            return Err(RlError::Config("replay capacity must be positive".into()));
        }
        Ok(ReplayBuffer { capacity, items: VecDeque::with_capacity(capacity.min(1 << 16)) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) -> Result<(), RlError> {
        if clip_reward(t.r) != t.r {
            return Err(RlError::Config(format!("stored reward {} is not clipped", t.r)));
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        Ok(())
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// Indices of `n` uniform draws with replacement; requires `len() >= n`.
    pub fn sample_indices(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<usize>, RlError> {
        if n == 0 || self.items.len() < n {
            return Err(RlError::Config(format!("cannot sample {n} from {} transitions", self.items.len())));
        }
        Ok((0..n).map(|_| rng.random_range(0..self.items.len())).collect())
    }

    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<&Transition>, RlError> {
        Ok(self.sample_indices(n, rng)?.into_iter().map(|i| &self.items[i]).collect())
    }
}

/// Linear decay from `start` to `end` over `decay_steps`, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: usize,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule { start: 1.0, end: 0.1, decay_steps: 1_000_000 }
    }
}

impl EpsilonSchedule {
    pub fn value(&self, step: usize) -> f64 {
        if step >= self.decay_steps {
            self.end
        } else {
            self.start + (self.end - self.start) * step as f64 / self.decay_steps as f64
        }
    }
}

/// ε-greedy over the binarized network; greedy ties go to the lowest index.
pub fn select_action(net: &BinarizedNetwork, s: &[f32], epsilon: f64, rng: &mut impl Rng) -> Result<usize, BnnError> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(BnnError::Shape(format!("epsilon {epsilon} outside [0, 1]")));
    }
    if rng.random::<f64>() < epsilon {
        Ok(rng.random_range(0..net.output_dim()))
    } else {
        Ok(argmax(&net.forward(s)?))
    }
}

/// `r` on terminal transitions, else `r + γ·max_a' Q_target(s', a')`.
pub fn compute_target(target: &FullPrecisionNetwork, t: &Transition, gamma: f64) -> Result<f64, BnnError> {
    if t.done {
        return Ok(t.r);
    }
    let q = target.forward(&t.s_next)?;
    Ok(t.r + gamma * q.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// What the target network receives at each sync.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SyncMode {
    /// Latent real-valued weights.
    #[default]
    FullPrecision,
    /// The binarized weights, i.e. the value network itself.
    BinarizedAblation,
}

impl SyncMode {
    pub fn weight_source(self) -> WeightSource {
        match self {
            SyncMode::FullPrecision => WeightSource::Latents,
            SyncMode::BinarizedAblation => WeightSource::Signs,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SyncMode::FullPrecision => "full-precision",
            SyncMode::BinarizedAblation => "binarized",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "binarized-ablation" => Some(SyncMode::BinarizedAblation),
            _ => [SyncMode::FullPrecision, SyncMode::BinarizedAblation].into_iter().find(|m| m.name() == s),
        }
    }
}

pub fn sync_target(value: &BinarizedNetwork, target: &mut FullPrecisionNetwork, mode: SyncMode) -> Result<(), RlError> {
    if !target.same_architecture(value) {
        return Err(RlError::ArchitectureMismatch);
    }
    *target = value.to_full_precision(mode.weight_source())?;
    Ok(())
}

#[cfg(test)]
mod tests;
