//! Mixed-integer encoding of a robustness query.
//!
//! Variables: inputs `x_i`, ℓ1 auxiliaries `t_i`, block outputs `z_L_i`,
//! phase indicators `b_L_i` for sign units whose bounds straddle zero, and
//! rival indicators `d_j`. Stable sign units are replaced by constants.

use super::blocks::{fold, Block};
use super::bounds::{propagate, Bounds, Interval};
use super::lp::{Sense, LP_TOLERANCE};
use super::{check_query, InputSet, Norm, OutputProperty};
use crate::error::VerifyError;
use crate::network::BinarizedNetwork;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub kind: VarKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub name: String,
    pub terms: Vec<(usize, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodeOptions {
    /// `b = 0` forces the pre-activation to `≤ −tie_break`, matching `sign(0) = +1`.
    pub tie_break: f64,
    /// Replace hidden ScaleShift scales by 1 before encoding.
    pub unit_hidden_scales: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions { tie_break: LP_TOLERANCE, unit_hidden_scales: false }
    }
}

/// A sign unit's status under the computed bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Phase {
    Fixed(f64),
    /// Index of the phase variable `b_L_i`.
    Free(usize),
}

#[derive(Debug, Clone)]
pub struct ConstraintSystem {
    pub variables: Vec<Variable>,
    pub constraints: Vec<Constraint>,
    pub(crate) net: BinarizedNetwork,
    pub(crate) blocks: Vec<Block>,
    pub(crate) bounds: Bounds,
    pub(crate) phases: Vec<Vec<Phase>>,
    pub(crate) set: InputSet,
    pub(crate) property: OutputProperty,
    pub(crate) tie_break: f64,
}

impl ConstraintSystem {
    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn input_set(&self) -> &InputSet {
        &self.set
    }

    pub fn property(&self) -> &OutputProperty {
        &self.property
    }

    pub fn binary_count(&self) -> usize {
        self.variables.iter().filter(|v| v.kind == VarKind::Binary).count()
    }

    pub fn unstable_count(&self) -> usize {
        self.phases.iter().flatten().filter(|p| matches!(p, Phase::Free(_))).count()
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    /// Largest constraint or bound violation of a full assignment.
    pub fn max_violation(&self, values: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (v, &x) in self.variables.iter().zip(values) {
            worst = worst.max(v.lower - x).max(x - v.upper);
        }
        for c in &self.constraints {
            let lhs: f64 = c.terms.iter().map(|&(j, a)| a * values[j]).sum();
            let gap = match c.sense {
                Sense::Le => lhs - c.rhs,
                Sense::Ge => c.rhs - lhs,
                Sense::Eq => (lhs - c.rhs).abs(),
            };
            worst = worst.max(gap);
        }
        worst
    }

    /// The assignment induced by a concrete input: exact forward values,
    /// phases from the signs, `t = |x − center|` and the first violated rival.
    pub fn assignment_for(&self, x: &[f32]) -> Vec<f64> {
        let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let values = super::blocks::eval_blocks(&self.blocks, &xf);
        let y = values.last().unwrap();
        let rival = self.property.violation(y);
        let mut out = vec![0.0; self.variables.len()];
        for (k, var) in self.variables.iter().enumerate() {
            let parts: Vec<&str> = var.name.split('_').collect();
            let num = |i: usize| parts[i].parse::<usize>().unwrap();
            out[k] = match parts[0] {
                "x" => xf[num(1)],
                "t" => (xf[num(1)] - self.set.center[num(1)] as f64).abs(),
                "z" => values[num(1) - 1][num(2)],
                "b" => (values[num(1) - 1][num(2)] >= 0.0) as u8 as f64,
                "d" => (rival == Some(num(1))) as u8 as f64,
                _ => 0.0,
            };
        }
        out
    }
}

struct Builder {
    variables: Vec<Variable>,
    constraints: Vec<Constraint>,
}

impl Builder {
    fn var(&mut self, name: String, lower: f64, upper: f64, kind: VarKind) -> usize {
        self.variables.push(Variable { name, lower, upper, kind });
        self.variables.len() - 1
    }

    fn row(&mut self, name: String, terms: Vec<(usize, f64)>, sense: Sense, rhs: f64) {
        self.constraints.push(Constraint { name, terms, sense, rhs });
    }
}

pub(crate) fn phases_of(blocks: &[Block], bounds: &Bounds) -> (Vec<Vec<Phase>>, usize) {
    let mut next = 0;
    let phases = blocks
        .iter()
        .zip(&bounds.layers)
        .map(|(block, layer)| {
            layer
                .iter()
                .map(|iv| match (block.signed, iv.stable_sign()) {
                    (false, _) => Phase::Fixed(0.0),
                    (true, Some(s)) => Phase::Fixed(s),
                    (true, None) => {
                        next += 1;
                        Phase::Free(next - 1)
                    }
                })
                .collect()
        })
        .collect();
    (phases, next)
}

/// Big-M bound of rival `j`'s indicator: large enough that `d_j = 0` relaxes
/// the row over the whole bounded region.
pub(crate) fn rival_big_m(out: &[Interval], target: usize, j: usize, delta: f64) -> f64 {
    (out[target].up - out[j].lo - delta).max(0.0) + 1.0
}

pub fn encode(
    net: &BinarizedNetwork,
    set: &InputSet,
    property: &OutputProperty,
    opts: &EncodeOptions,
) -> Result<ConstraintSystem, VerifyError> {
    check_query(net, set, Some(property))?;
    if !(opts.tie_break.is_finite() && opts.tie_break > 0.0) {
        return Err(VerifyError::InvalidQuery("tie-break margin must be positive".into()));
    }
    let blocks = fold(net, opts.unit_hidden_scales)?;
    let bounds = propagate(&blocks, set);
    let (phases, _) = phases_of(&blocks, &bounds);
    let tau = opts.tie_break;
    let mut b = Builder { variables: Vec::new(), constraints: Vec::new() };
    let kind = if set.discrete { VarKind::Binary } else { VarKind::Continuous };
    let boxes = set.coordinate_box();
    let xs: Vec<usize> = boxes.iter().enumerate().map(|(i, &(lo, up))| b.var(format!("x_{i}"), lo, up, kind)).collect();
    if set.norm == Norm::L1 {
        let mut budget = Vec::with_capacity(xs.len());
        for (i, &x) in xs.iter().enumerate() {
            let c = set.center[i] as f64;
            let t = b.var(format!("t_{i}"), 0.0, (boxes[i].1 - c).max(c - boxes[i].0), VarKind::Continuous);
            b.row(format!("l1p_{i}"), vec![(t, 1.0), (x, -1.0)], Sense::Ge, -c);
            b.row(format!("l1m_{i}"), vec![(t, 1.0), (x, 1.0)], Sense::Ge, c);
            budget.push((t, 1.0));
        }
        b.row("l1".into(), budget, Sense::Le, set.epsilon);
    }
    // Per block: z variables, then b variables for that block's unstable units.
    let mut prev_b: Vec<Option<usize>> = Vec::new();
    let mut z_last = Vec::new();
    for (k, block) in blocks.iter().enumerate() {
        let layer = k + 1;
        let zs: Vec<usize> = bounds.layers[k]
            .iter()
            .enumerate()
            .map(|(i, iv)| b.var(format!("z_{layer}_{i}"), iv.lo, iv.up, VarKind::Continuous))
            .collect();
        for (i, row) in block.rows.iter().enumerate() {
            let mut terms = vec![(zs[i], 1.0)];
            let mut rhs = block.offset[i];
            for &(j, a) in row {
                if k == 0 {
                    terms.push((xs[j], -a));
                    continue;
                }
                match (phases[k - 1][j], prev_b[j]) {
                    (Phase::Free(_), Some(bj)) => {
                        terms.push((bj, -2.0 * a));
                        rhs -= a;
                    }
                    (Phase::Fixed(s), _) => rhs += a * s,
                    _ => return Err(VerifyError::Internal("phase without indicator".into())),
                }
            }
            b.row(format!("eq_{layer}_{i}"), terms, Sense::Eq, rhs);
        }
        prev_b = vec![None; block.out_dim()];
        if block.signed {
            for (i, iv) in bounds.layers[k].iter().enumerate() {
                if let Phase::Free(_) = phases[k][i] {
                    let bi = b.var(format!("b_{layer}_{i}"), 0.0, 1.0, VarKind::Binary);
                    b.row(format!("on_{layer}_{i}"), vec![(zs[i], 1.0), (bi, iv.lo)], Sense::Ge, iv.lo);
                    b.row(format!("off_{layer}_{i}"), vec![(zs[i], 1.0), (bi, -(iv.up + tau))], Sense::Le, -tau);
                    prev_b[i] = Some(bi);
                }
            }
        }
        z_last = zs;
    }
    let out = bounds.layers.last().unwrap();
    let target = property.target;
    let mut any = Vec::new();
    for j in 0..out.len() {
        if j == target {
            continue;
        }
        let m = rival_big_m(out, target, j, property.delta);
        let d = b.var(format!("d_{j}"), 0.0, 1.0, VarKind::Binary);
        b.row(
            format!("rival_{j}"),
            vec![(z_last[j], 1.0), (z_last[target], -1.0), (d, -m)],
            Sense::Ge,
            -property.delta - m,
        );
        any.push((d, 1.0));
    }
    b.row("any_rival".into(), any, Sense::Ge, 1.0);
    Ok(ConstraintSystem {
        variables: b.variables,
        constraints: b.constraints,
        net: net.clone(),
        blocks,
        bounds,
        phases,
        set: set.clone(),
        property: *property,
        tie_break: tau,
    })
}
