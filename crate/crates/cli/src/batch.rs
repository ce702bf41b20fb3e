//! Property batches for `verify` and property specs for `export-lp`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bqn_core::network::{argmax, BinarizedNetwork};
use bqn_core::tensorfile::read_tensors;
use bqn_core::verifier::{InputSet, Norm, OutputProperty, DEFAULT_DELTA};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

/// Which input entries a property may perturb.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Perturb {
    /// Every entry of the frame stack.
    All,
    /// Only the most recent frame of the stack.
    Latest,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropertyEntry {
    pub id: Option<String>,
    pub states: Option<PathBuf>,
    pub state: usize,
    pub epsilon: Option<f64>,
    pub norm: Option<String>,
    pub delta: Option<f64>,
    pub target: Option<usize>,
    pub perturb: Option<Perturb>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropertyBatch {
    pub model: Option<PathBuf>,
    pub timeout_s: Option<f64>,
    /// Recorded states (a tensor file) used by entries without their own source.
    pub states: Option<PathBuf>,
    /// Draw this many distinct states uniformly from `states` when no
    /// explicit `[[property]]` entries are given.
    pub sample: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_norm")]
    pub norm: String,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_perturb")]
    pub perturb: Perturb,
    #[serde(default, rename = "property")]
    pub properties: Vec<PropertyEntry>,
}

fn default_epsilon() -> f64 {
    0.01
}
fn default_norm() -> String {
    "l1".into()
}
fn default_delta() -> f64 {
    DEFAULT_DELTA
}
fn default_perturb() -> Perturb {
    Perturb::All
}

/// One fully resolved robustness query.
#[derive(Debug, Clone)]
pub struct Query {
    pub id: String,
    pub set: InputSet,
    /// Explicit target; `None` means the model's own argmax at the center.
    pub target: Option<usize>,
    pub delta: f64,
}

impl Query {
    pub fn property(&self, net: &BinarizedNetwork) -> Result<OutputProperty> {
        let target = match self.target {
            Some(t) => t,
            None => argmax(&net.forward(&self.set.center)?),
        };
        Ok(OutputProperty { target, delta: self.delta })
    }
}

pub fn parse_norm(s: &str) -> Result<Norm> {
    Norm::parse(s).with_context(|| format!("unknown norm `{s}` (l1, linf)"))
}

fn load_states(path: &Path) -> Result<Vec<Vec<f32>>> {
    let tensors = read_tensors(path).with_context(|| format!("cannot read states from {}", path.display()))?;
    Ok(tensors.into_iter().map(|(_, v)| v).collect())
}

fn build_set(center: Vec<f32>, epsilon: f64, norm: Norm, perturb: Perturb, channels: usize) -> Result<InputSet> {
    let set = InputSet::new(center, epsilon, norm)?;
    Ok(match perturb {
        Perturb::All => set,
        Perturb::Latest => {
            // Frames are interleaved per pixel (HWC); the newest is the last channel.
            let free = (0..set.center.len()).map(|i| i % channels == channels - 1).collect();
            set.with_free(free)?
        }
    })
}

impl PropertyBatch {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let batch: PropertyBatch = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(1, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            anyhow::anyhow!("{origin}:{line}: {}", e.message())
        })?;
        if batch.timeout_s.is_some_and(|t| !(t > 0.0)) {
            bail!("{origin}: timeout_s must be positive");
        }
        Ok(batch)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read batch {}", path.display()))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Resolves state files (relative to `base`) and defaults into queries.
    pub fn queries(&self, base: &Path, channels: usize) -> Result<Vec<Query>> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let default_states = match &self.states {
            Some(p) => Some(load_states(&resolve(p))?),
            None => None,
        };
        let mut entries = self.properties.clone();
        if entries.is_empty() {
            let (Some(n), Some(states)) = (self.sample, &default_states) else {
                bail!("batch has no [[property]] entries and no `states` + `sample` to draw from");
            };
            if n > states.len() {
                bail!("cannot sample {n} states from a file holding {}", states.len());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            let mut picked = sample(&mut rng, states.len(), n).into_vec();
            picked.sort_unstable();
            entries = picked
                .into_iter()
                .map(|state| PropertyEntry {
                    id: None,
                    states: None,
                    state,
                    epsilon: None,
                    norm: None,
                    delta: None,
                    target: None,
                    perturb: None,
                })
                .collect();
        }
        let mut out = Vec::with_capacity(entries.len());
        for (k, e) in entries.iter().enumerate() {
            let own;
            let states = match &e.states {
                Some(p) => {
                    own = load_states(&resolve(p))?;
                    &own
                }
                None => default_states.as_ref().context("property without a state source")?,
            };
            let center = states
                .get(e.state)
                .with_context(|| format!("state index {} out of range ({} states)", e.state, states.len()))?
                .clone();
            let norm = parse_norm(e.norm.as_deref().unwrap_or(&self.norm))?;
            let epsilon = e.epsilon.unwrap_or(self.epsilon);
            let set = build_set(center, epsilon, norm, e.perturb.unwrap_or(self.perturb), channels)?;
            out.push(Query {
                id: e.id.clone().unwrap_or_else(|| format!("p{k:03}")),
                set,
                target: e.target,
                delta: e.delta.unwrap_or(self.delta),
            });
        }
        Ok(out)
    }
}

/// `export-lp` property spec: comma-separated `key=value` pairs with keys
/// `states`, `index`, `epsilon`, `norm`, `delta`, `target` and `perturb`.
pub fn parse_property_spec(spec: &str, channels: usize) -> Result<Query> {
    let mut states = None;
    let (mut index, mut epsilon, mut norm, mut delta, mut target, mut perturb) =
        (0usize, default_epsilon(), Norm::L1, DEFAULT_DELTA, None, Perturb::All);
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').with_context(|| format!("expected key=value, found `{part}`"))?;
        let num = || v.parse::<f64>().with_context(|| format!("bad number for {k}: `{v}`"));
        match k {
            "states" => states = Some(PathBuf::from(v)),
            "index" => index = v.parse().with_context(|| format!("bad index `{v}`"))?,
            "epsilon" => epsilon = num()?,
            "norm" => norm = parse_norm(v)?,
            "delta" => delta = num()?,
            "target" => target = Some(v.parse().with_context(|| format!("bad target `{v}`"))?),
            "perturb" => {
                perturb = match v {
                    "all" => Perturb::All,
                    "latest" => Perturb::Latest,
                    _ => bail!("perturb must be `all` or `latest`"),
                }
            }
            _ => bail!("unknown property key `{k}`"),
        }
    }
    let states = states.context("property spec needs states=PATH")?;
    let all = load_states(&states)?;
    let center = all.get(index).with_context(|| format!("state index {index} out of range ({} states)", all.len()))?.clone();
    Ok(Query { id: format!("state{index}"), set: build_set(center, epsilon, norm, perturb, channels)?, target, delta })
}
