//! Argmax-robustness verification for binarized networks.
//!
//! A query pairs an input set (an ℓ1 or ℓ∞ ball around a frame, intersected
//! with the pixel box `[0, 1]`) with the property that a given action stays
//! strictly optimal. The network, the set and the negated property are
//! encoded as mixed-integer linear constraints and searched by
//! branch-and-bound; any candidate counterexample is replayed through the
//! exact forward pass before it is reported.

mod blocks;
mod bounds;
mod encode;
pub mod lp;
mod lpfile;
mod solve;

use std::time::Duration;

use crate::error::VerifyError;
use crate::network::{argmax, BinarizedNetwork};

pub use blocks::{eval_blocks, fold, Block};
pub use bounds::{Bounds, Interval};
pub use encode::{encode, ConstraintSystem, Constraint, EncodeOptions, VarKind, Variable};
pub use lp::{lp_feasible, lp_feasible_until, LpOutcome, LpProblem, Sense, LP_TOLERANCE};
pub use lpfile::{export_lp, parse_lp, to_lp_string, ParsedConstraint, ParsedLp};
pub use solve::{solve, Counterexample, Solution, SolveOptions, SolveStats, Verdict};

/// Default strictness margin: `y_{i*} > y_j` is checked as `y_{i*} ≥ y_j + δ`.
pub const DEFAULT_DELTA: f64 = 1e-6;
/// Tolerance on set membership in [`check_counterexample`].
pub const MEMBERSHIP_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Norm {
    L1,
    Linf,
}

impl Norm {
    pub fn name(self) -> &'static str {
        match self {
            Norm::L1 => "l1",
            Norm::Linf => "linf",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" | "1" => Some(Norm::L1),
            "linf" | "inf" | "l_inf" => Some(Norm::Linf),
            _ => None,
        }
    }
}

/// `{x ∈ [0,1]^n : ‖x − center‖_p ≤ epsilon}`. With `discrete`, inputs are
/// further restricted to `{0, 1}`, so an ℓ1 ball becomes a Hamming ball.
/// Coordinates marked `false` in `free` are held at the center.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSet {
    pub center: Vec<f32>,
    pub epsilon: f64,
    pub norm: Norm,
    pub discrete: bool,
    pub free: Option<Vec<bool>>,
}

impl InputSet {
    pub fn new(center: Vec<f32>, epsilon: f64, norm: Norm) -> Result<Self, VerifyError> {
        let set = InputSet { center, epsilon, norm, discrete: false, free: None };
        set.validate()?;
        Ok(set)
    }

    /// Binary inputs within Hamming distance `radius` of a binary center.
    pub fn hamming(center: Vec<f32>, radius: usize) -> Result<Self, VerifyError> {
        let set = InputSet { center, epsilon: radius as f64, norm: Norm::L1, discrete: true, free: None };
        set.validate()?;
        Ok(set)
    }

    /// Restricts perturbations to the coordinates where `free` is true.
    pub fn with_free(mut self, free: Vec<bool>) -> Result<Self, VerifyError> {
        if free.len() != self.center.len() {
            return Err(VerifyError::InvalidQuery(format!("mask has {} entries for {} inputs", free.len(), self.center.len())));
        }
        self.free = Some(free);
        Ok(self)
    }

    fn is_free(&self, i: usize) -> bool {
        self.free.as_ref().is_none_or(|f| f[i])
    }

    pub fn validate(&self) -> Result<(), VerifyError> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(VerifyError::InvalidQuery(format!("radius {} must be finite and non-negative", self.epsilon)));
        }
        if self.center.is_empty() || self.center.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(VerifyError::InvalidQuery("center must be non-empty and inside [0, 1]".into()));
        }
        if self.discrete && self.center.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(VerifyError::InvalidQuery("discrete sets need a binary center".into()));
        }
        if self.free.as_ref().is_some_and(|f| f.len() != self.center.len()) {
            return Err(VerifyError::InvalidQuery("mask length differs from the center".into()));
        }
        Ok(())
    }

    /// Per-coordinate range implied by the norm ball and the pixel box.
    pub fn coordinate_box(&self) -> Vec<(f64, f64)> {
        self.center
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let c = c as f64;
                if !self.is_free(i) {
                    return (c, c);
                }
                let (lo, up) = ((c - self.epsilon).max(0.0), (c + self.epsilon).min(1.0));
                if self.discrete {
                    (lo.ceil(), up.floor())
                } else {
                    (lo, up)
                }
            })
            .collect()
    }

    pub fn contains(&self, x: &[f32]) -> bool {
        if x.len() != self.center.len() || x.iter().any(|v| !v.is_finite()) {
            return false;
        }
        let tol = MEMBERSHIP_TOLERANCE;
        if x.iter().any(|&v| (v as f64) < -tol || (v as f64) > 1.0 + tol) {
            return false;
        }
        if self.discrete && x.iter().any(|&v| v != 0.0 && v != 1.0) {
            return false;
        }
        if (0..x.len()).any(|i| !self.is_free(i) && (x[i] as f64 - self.center[i] as f64).abs() > tol) {
            return false;
        }
        let diffs = x.iter().zip(&self.center).map(|(&a, &b)| (a as f64 - b as f64).abs());
        let dist = match self.norm {
            Norm::L1 => diffs.sum::<f64>(),
            Norm::Linf => diffs.fold(0.0, f64::max),
        };
        dist <= self.epsilon + tol
    }
}

/// Action `target` must beat every other action by at least `delta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputProperty {
    pub target: usize,
    pub delta: f64,
}

impl OutputProperty {
    pub fn new(target: usize) -> Self {
        OutputProperty { target, delta: DEFAULT_DELTA }
    }

    /// First rival `j` with `y_j ≥ y_target − δ`, if the outputs violate the property.
    pub fn violation(&self, y: &[f64]) -> Option<usize> {
        let best = y[self.target];
        (0..y.len()).find(|&j| j != self.target && y[j] >= best - self.delta)
    }
}

pub fn propagate_bounds(net: &BinarizedNetwork, set: &InputSet) -> Result<Bounds, VerifyError> {
    check_query(net, set, None)?;
    Ok(bounds::propagate(&fold(net, false)?, set))
}

fn check_query(net: &BinarizedNetwork, set: &InputSet, property: Option<&OutputProperty>) -> Result<(), VerifyError> {
    set.validate()?;
    if set.center.len() != net.input_shape().len() {
        return Err(VerifyError::InvalidQuery(format!(
            "center has {} values, network expects {}",
            set.center.len(),
            net.input_shape().len()
        )));
    }
    if let Some(p) = property {
        if net.output_dim() < 2 {
            return Err(VerifyError::InvalidQuery("robustness needs at least two actions".into()));
        }
        if p.target >= net.output_dim() {
            return Err(VerifyError::InvalidQuery(format!("target action {} out of range", p.target)));
        }
        if !(p.delta.is_finite() && p.delta >= 0.0) {
            return Err(VerifyError::InvalidQuery("delta must be finite and non-negative".into()));
        }
    }
    Ok(())
}

/// True iff `x` lies in the set and the exact forward pass violates the property.
pub fn check_counterexample(net: &BinarizedNetwork, x: &[f32], set: &InputSet, property: &OutputProperty) -> bool {
    if !set.contains(x) || property.target >= net.output_dim() {
        return false;
    }
    match net.forward(x) {
        Ok(y) => property.violation(&y).is_some(),
        Err(_) => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub timeout: Option<Duration>,
    pub encode: EncodeOptions,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { timeout: None, encode: EncodeOptions::default() }
    }
}

/// Checks the premise (the network picks `property.target` at the center),
/// then bounds, encodes and solves.
pub fn verify_robustness(
    net: &BinarizedNetwork,
    set: &InputSet,
    property: &OutputProperty,
    opts: &VerifyOptions,
) -> Result<Solution, VerifyError> {
    check_query(net, set, Some(property))?;
    let found = argmax(&net.forward(&set.center)?);
    if found != property.target {
        return Err(VerifyError::PremiseMismatch { expected: property.target, found });
    }
    let system = encode(net, set, property, &opts.encode)?;
    Ok(solve(&system, &SolveOptions { timeout: opts.timeout }))
}
