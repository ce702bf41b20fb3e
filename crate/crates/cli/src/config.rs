//! Run configuration files (TOML).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bqn_core::network::presets::Preset;
use bqn_core::network::InitOptions;
use bqn_core::rl::{EnvSpec, EpsilonSchedule, SyncMode, TrainConfig};
use bqn_core::training::{ForwardMode, RmsPropConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub sync_mode: String,
    pub env: EnvSection,
    pub network: NetworkSection,
    pub training: TrainingSection,
    pub epsilon: EpsilonSection,
    pub optimizer: OptimizerSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub frame_skip: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub preset: String,
    pub forward_mode: String,
    pub latent_range: f32,
    pub shift_gain: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub episodes: usize,
    pub max_steps: usize,
    pub gamma: f64,
    pub sync_every: usize,
    pub buffer_capacity: usize,
    pub prefill: usize,
    pub batch_size: usize,
    pub train_every: usize,
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpsilonSection {
    pub start: f64,
    pub end: f64,
    pub decay_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    pub wall_clock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let (EnvSpec::Catch { height, width } | EnvSpec::Gridworld { height, width }) = t.env;
        RunConfig {
            seed: t.seed,
            sync_mode: t.sync_mode.name().into(),
            env: EnvSection { name: "catch".into(), height, width, frame_skip: t.frame_skip },
            network: NetworkSection {
                preset: t.preset.name().into(),
                forward_mode: "binary".into(),
                latent_range: t.init.latent_range,
                shift_gain: t.init.shift_gain,
            },
            training: TrainingSection {
                episodes: t.episodes,
                max_steps: t.max_steps,
                gamma: t.gamma,
                sync_every: t.sync_every,
                buffer_capacity: t.buffer_capacity,
                prefill: t.prefill,
                batch_size: t.batch_size,
                train_every: t.train_every,
                checkpoint_every: t.checkpoint_every,
            },
            epsilon: EpsilonSection { start: t.epsilon.start, end: t.epsilon.end, decay_steps: t.epsilon.decay_steps },
            optimizer: OptimizerSection {
                learning_rate: t.optimizer.learning_rate,
                decay: t.optimizer.decay,
                epsilon: t.optimizer.epsilon,
            },
            output: OutputSection { dir: None, wall_clock: t.wall_clock },
        }
    }
}

impl Default for EnvSection {
    fn default() -> Self {
        RunConfig::default().env
    }
}
impl Default for NetworkSection {
    fn default() -> Self {
        RunConfig::default().network
    }
}
impl Default for TrainingSection {
    fn default() -> Self {
        RunConfig::default().training
    }
}
impl Default for EpsilonSection {
    fn default() -> Self {
        RunConfig::default().epsilon
    }
}
impl Default for OptimizerSection {
    fn default() -> Self {
        RunConfig::default().optimizer
    }
}
impl Default for OutputSection {
    fn default() -> Self {
        RunConfig::default().output
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of the first `key = ...` assignment, for semantic errors.
fn key_line(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let l = l.trim_start();
        l.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(1, |s| line_of(text, s.start));
            anyhow::anyhow!("{origin}:{line}: {}", e.message())
        })?;
        if let Err(e) = config.to_train_config() {
            let key = e.key;
            let line = key_line(text, key).map_or(String::new(), |l| format!("{l}:"));
            bail!("{origin}:{line} {}", e.message);
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Key-sorted TOML text; parsing it yields the same config.
    pub fn canonical(&self) -> String {
        let value = toml::Value::try_from(self).expect("config serializes");
        toml::to_string(&value).expect("table renders")
    }

    pub fn to_train_config(&self) -> Result<TrainConfig, KeyError> {
        let err = |key: &'static str, message: String| KeyError { key, message };
        let env = EnvSpec::parse(&format!("{}:{}x{}", self.env.name, self.env.height, self.env.width))
            .map_err(|e| err("name", e.to_string()))?;
        let preset = Preset::from_name(&self.network.preset)
            .ok_or_else(|| err("preset", format!("unknown preset `{}` (bqn-small, bqn, bqn-l)", self.network.preset)))?;
        let sync_mode = SyncMode::from_name(&self.sync_mode)
            .ok_or_else(|| err("sync_mode", format!("unknown sync mode `{}` (full-precision, binarized-ablation)", self.sync_mode)))?;
        let forward_mode = match self.network.forward_mode.as_str() {
            "binary" => ForwardMode::Binary,
            "surrogate" => ForwardMode::Surrogate,
            other => return Err(err("forward_mode", format!("unknown forward mode `{other}` (binary, surrogate)"))),
        };
        let t = &self.training;
        let config = TrainConfig {
            env,
            preset,
            seed: self.seed,
            episodes: t.episodes,
            max_steps: t.max_steps,
            gamma: t.gamma,
            sync_every: t.sync_every,
            buffer_capacity: t.buffer_capacity,
            prefill: t.prefill,
            batch_size: t.batch_size,
            train_every: t.train_every,
            epsilon: EpsilonSchedule { start: self.epsilon.start, end: self.epsilon.end, decay_steps: self.epsilon.decay_steps },
            optimizer: RmsPropConfig {
                learning_rate: self.optimizer.learning_rate,
                decay: self.optimizer.decay,
                epsilon: self.optimizer.epsilon,
            },
            frame_skip: self.env.frame_skip,
            sync_mode,
            forward_mode,
            init: InitOptions { latent_range: self.network.latent_range, shift_gain: self.network.shift_gain },
            checkpoint_every: t.checkpoint_every,
            out_dir: self.output.dir.clone(),
            wall_clock: self.output.wall_clock,
        };
        if let Err(e) = config.validate() {
            let msg = e.to_string();
            let key = ["gamma", "batch_size", "buffer_capacity", "start", "learning_rate", "latent_range"]
                .into_iter()
                .find(|k| msg.contains(k))
                .unwrap_or("seed");
            return Err(err(key, msg));
        }
        Ok(config)
    }
}

/// A semantic config error tied to the key that caused it.
#[derive(Debug)]
pub struct KeyError {
    pub key: &'static str,
    pub message: String,
}
