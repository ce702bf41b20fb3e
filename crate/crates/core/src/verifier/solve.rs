//! Branch-and-bound over a reduced form of the constraint system.
//!
//! Block outputs are substituted away: every unstable pre-activation and
//! every output is an affine expression over the relevant inputs and the
//! phase variables (a sign is `2b − 1`). Inputs that no unstable unit or
//! output depends on are fixed at the center. Each node solves an LP
//! relaxation; integral LP points are turned into concrete inputs and
//! replayed through the exact forward pass. A seeded sampling attack runs
//! before the search.

use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::encode::{phases_of, rival_big_m, ConstraintSystem, Phase};
use super::lp::{lp_feasible_until, LpOutcome, LpProblem, Sense, LP_TOLERANCE};
use super::{check_counterexample, Norm};
use crate::network::argmax;

/// Margin used when an integral LP point fails replay at a fully fixed leaf.
const RETRY_MARGIN: f64 = 1e-5;
const INTEGRALITY: f64 = 1e-6;
/// Candidate inputs tried by the sampling attack before the search starts.
const ATTACK_TRIALS: usize = 2000;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SolveOptions {
    pub timeout: Option<Duration>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Counterexample {
    pub x: Vec<f32>,
    pub y: Vec<f64>,
    /// Action the network prefers at `x` (or ties with the target).
    pub rival: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Holds,
    Counterexample(Counterexample),
    /// The search stopped with `open_nodes` subproblems undecided.
    Timeout { open_nodes: usize },
}

impl Verdict {
    pub fn name(&self) -> &'static str {
        match self {
            Verdict::Holds => "verified",
            Verdict::Counterexample(_) => "counterexample",
            Verdict::Timeout { .. } => "timeout",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SolveStats {
    pub nodes: u64,
    pub lp_calls: u64,
    pub binaries: usize,
    pub unstable: usize,
    pub wall: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub verdict: Verdict,
    pub stats: SolveStats,
}

#[derive(Debug, Clone, Default)]
struct Expr {
    terms: Vec<(usize, f64)>,
    constant: f64,
}

impl Expr {
    fn add(&mut self, var: usize, coef: f64) {
        match self.terms.iter_mut().find(|t| t.0 == var) {
            Some(t) => t.1 += coef,
            None => self.terms.push((var, coef)),
        }
    }
}

struct Reduced {
    /// LP variable per relevant input, by input index.
    input_var: Vec<Option<usize>>,
    /// `(unstable unit expression, interval, phase var)`.
    units: Vec<(Expr, f64, f64, usize)>,
    outputs: Vec<Expr>,
    /// Binary LP variables in branching order.
    order: Vec<usize>,
    rival_var: Vec<(usize, usize, f64)>,
    base: LpProblem,
}

fn reduce(sys: &ConstraintSystem) -> Reduced {
    let blocks = &sys.blocks;
    let bounds = &sys.bounds;
    let (phases, _) = phases_of(blocks, bounds);
    let n_in = blocks[0].in_dim;
    let last = blocks.len() - 1;

    // Which units need expressions: unstable units and outputs, plus
    // (transitively) nothing else since stable units are constants.
    let needed = |k: usize, i: usize| k == last || matches!(phases[k][i], Phase::Free(_));
    let mut relevant = vec![false; n_in];
    for (i, row) in blocks[0].rows.iter().enumerate() {
        if needed(0, i) {
            row.iter().for_each(|&(j, _)| relevant[j] = true);
        }
    }

    let mut p = LpProblem::default();
    let boxes = sys.set.coordinate_box();
    let mut input_var = vec![None; n_in];
    for j in (0..n_in).filter(|&j| relevant[j]) {
        input_var[j] = Some(p.add_var(boxes[j].0, boxes[j].1));
    }
    if sys.set.norm == Norm::L1 {
        let mut budget = Vec::new();
        for j in 0..n_in {
            if let Some(x) = input_var[j] {
                let c = sys.set.center[j] as f64;
                let t = p.add_var(0.0, (boxes[j].1 - c).max(c - boxes[j].0));
                p.add_row(vec![(t, 1.0), (x, -1.0)], Sense::Ge, -c);
                p.add_row(vec![(t, 1.0), (x, 1.0)], Sense::Ge, c);
                budget.push((t, 1.0));
            }
        }
        p.add_row(budget, Sense::Le, sys.set.epsilon);
    }

    let mut units = Vec::new();
    let mut phase_order: Vec<(usize, usize, f64, usize)> = Vec::new();
    let mut prev_var: Vec<Option<usize>> = Vec::new();
    let mut outputs = Vec::new();
    for (k, block) in blocks.iter().enumerate() {
        let mut cur_var = vec![None; block.out_dim()];
        for (i, row) in block.rows.iter().enumerate() {
            if !needed(k, i) {
                continue;
            }
            let mut e = Expr { terms: Vec::new(), constant: block.offset[i] };
            for &(j, a) in row {
                if k == 0 {
                    match input_var[j] {
                        Some(x) => e.add(x, a),
                        None => e.constant += a * sys.set.center[j] as f64,
                    }
                    continue;
                }
                match phases[k - 1][j] {
                    Phase::Fixed(s) => e.constant += a * s,
                    Phase::Free(_) => {
                        e.add(prev_var[j].expect("unstable unit has a variable"), 2.0 * a);
                        e.constant -= a;
                    }
                }
            }
            if k == last {
                outputs.push(e);
            } else {
                let iv = bounds.layers[k][i];
                let b = p.add_var(0.0, 1.0);
                cur_var[i] = Some(b);
                phase_order.push((k, i, iv.width(), b));
                units.push((e, iv.lo, iv.up, b));
            }
        }
        prev_var = cur_var;
    }

    let target = sys.property.target;
    let out_iv = bounds.layers.last().unwrap();
    let mut rival_var = Vec::new();
    for j in (0..outputs.len()).filter(|&j| j != target) {
        let d = p.add_var(0.0, 1.0);
        rival_var.push((j, d, rival_big_m(out_iv, target, j, sys.property.delta)));
    }

    phase_order.sort_by(|a, b| a.0.cmp(&b.0).then(b.2.total_cmp(&a.2)).then(a.1.cmp(&b.1)));
    let mut order: Vec<usize> = rival_var.iter().map(|r| r.1).collect();
    order.extend(phase_order.iter().map(|p| p.3));
    if sys.set.discrete {
        order.extend(input_var.iter().flatten());
    }
    Reduced { input_var, units, outputs, order, rival_var, base: p }
}

impl Reduced {
    /// Base problem plus the phase and rival rows. `margin` strengthens the
    /// strict sides (used for the retry at inconclusive leaves).
    fn problem(&self, tau: f64, delta: f64, margin: f64) -> LpProblem {
        let mut p = self.base.clone();
        for (e, lo, up, b) in &self.units {
            let mut on = e.terms.clone();
            on.push((*b, lo - margin));
            p.add_row(on, Sense::Ge, lo - e.constant);
            let mut off = e.terms.clone();
            off.push((*b, -(up + tau + margin)));
            p.add_row(off, Sense::Le, -tau - margin - e.constant);
        }
        let target = self.target_index();
        let mut any = Vec::new();
        for &(j, d, m) in &self.rival_var {
            let m = m + margin;
            let mut diff = Expr { terms: self.outputs[j].terms.clone(), constant: 0.0 };
            for &(v, a) in &self.outputs[target].terms {
                diff.add(v, -a);
            }
            diff.add(d, -m);
            let rhs = -delta + margin - m - (self.outputs[j].constant - self.outputs[target].constant);
            p.add_row(diff.terms, Sense::Ge, rhs);
            any.push((d, 1.0));
        }
        p.add_row(any, Sense::Ge, 1.0);
        p
    }

    fn target_index(&self) -> usize {
        (0..self.outputs.len()).find(|j| !self.rival_var.iter().any(|r| r.0 == *j)).unwrap()
    }
}

/// Activity-bound check: a row that cannot be satisfied within the current
/// variable bounds proves the node infeasible without an LP.
fn activity_infeasible(p: &LpProblem) -> bool {
    p.rows.iter().any(|r| {
        let (mut lo, mut up) = (0.0, 0.0);
        for &(j, a) in &r.terms {
            if a >= 0.0 {
                lo += a * p.lower[j];
                up += a * p.upper[j];
            } else {
                lo += a * p.upper[j];
                up += a * p.lower[j];
            }
        }
        let tol = LP_TOLERANCE * (1.0 + r.rhs.abs());
        match r.sense {
            Sense::Le => lo > r.rhs + tol,
            Sense::Ge => up < r.rhs - tol,
            Sense::Eq => lo > r.rhs + tol || up < r.rhs - tol,
        }
    })
}

/// Maps an LP point to a concrete input in the set.
fn candidate(sys: &ConstraintSystem, red: &Reduced, point: &[f64]) -> Vec<f32> {
    let set = &sys.set;
    let c: Vec<f64> = set.center.iter().map(|&v| v as f64).collect();
    let mut x = c.clone();
    for (j, v) in red.input_var.iter().enumerate() {
        if let Some(var) = v {
            x[j] = point[*var].clamp(0.0, 1.0);
        }
    }
    if set.discrete {
        x.iter_mut().for_each(|v| *v = v.round());
    }
    match set.norm {
        Norm::Linf => {
            for (v, &cv) in x.iter_mut().zip(&c) {
                *v = v.clamp(cv - set.epsilon, cv + set.epsilon).clamp(0.0, 1.0);
            }
        }
        Norm::L1 => {
            let dist: f64 = x.iter().zip(&c).map(|(a, b)| (a - b).abs()).sum();
            if dist > set.epsilon && !set.discrete {
                let s = set.epsilon / dist;
                for (v, &cv) in x.iter_mut().zip(&c) {
                    *v = cv + (*v - cv) * s;
                }
            }
        }
    }
    x.iter().map(|&v| v as f32).collect()
}

fn replay(sys: &ConstraintSystem, x: Vec<f32>) -> Option<Counterexample> {
    if !check_counterexample(&sys.net, &x, &sys.set, &sys.property) {
        return None;
    }
    let y = sys.net.forward(&x).ok()?;
    let rival = sys.property.violation(&y).unwrap_or_else(|| argmax(&y));
    Some(Counterexample { x, y, rival })
}

/// Seeded random search around the center. Every candidate goes through
/// `replay`, so only genuine violations come back.
fn attack(sys: &ConstraintSystem, deadline: Option<Instant>) -> Option<Counterexample> {
    let set = &sys.set;
    let boxes = set.coordinate_box();
    let free: Vec<usize> = (0..boxes.len()).filter(|&i| boxes[i].0 < boxes[i].1).collect();
    if free.is_empty() {
        return None;
    }
    let c: Vec<f64> = set.center.iter().map(|&v| v as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for trial in 0..ATTACK_TRIALS {
        if trial % 64 == 0 && deadline.is_some_and(|d| Instant::now() >= d) {
            return None;
        }
        let mut x = c.clone();
        if set.discrete {
            let most = if set.norm == Norm::L1 { set.epsilon.floor() as usize } else { free.len() };
            let k = rng.random_range(1..=most.min(free.len()).max(1));
            for i in sample(&mut rng, free.len(), k).into_iter().map(|i| free[i]) {
                x[i] = if boxes[i].0 < c[i] { boxes[i].0 } else { boxes[i].1 };
            }
        } else if set.norm == Norm::Linf {
            let p = [0.1, 0.5, 1.0][trial % 3];
            for &i in &free {
                if rng.random_bool(p) {
                    x[i] = if rng.random_bool(0.5) { boxes[i].0 } else { boxes[i].1 };
                }
            }
        } else {
            let k = rng.random_range(1..=free.len().min(64));
            let share = set.epsilon * (1.0 - 1e-6) / k as f64;
            for i in sample(&mut rng, free.len(), k).into_iter().map(|i| free[i]) {
                let (down, up) = (c[i] - boxes[i].0, boxes[i].1 - c[i]);
                let go_up = down <= 0.0 || (up > 0.0 && rng.random_bool(0.5));
                x[i] = if go_up { c[i] + share.min(up) } else { c[i] - share.min(down) };
            }
        }
        if let Some(cex) = replay(sys, x.iter().map(|&v| v as f32).collect()) {
            return Some(cex);
        }
    }
    None
}

pub fn solve(sys: &ConstraintSystem, opts: &SolveOptions) -> Solution {
    let start = Instant::now();
    let red = reduce(sys);
    let delta = sys.property.delta;
    let base = red.problem(sys.tie_break, delta, 0.0);
    let mut stats = SolveStats {
        binaries: red.order.len(),
        unstable: red.units.len(),
        ..SolveStats::default()
    };
    let deadline = opts.timeout.map(|t| start + t);
    let mut stack: Vec<Vec<(usize, f64)>> = vec![Vec::new()];
    let mut inconclusive = 0usize;
    let finish = |verdict, mut stats: SolveStats| {
        stats.wall = start.elapsed();
        Solution { verdict, stats }
    };
    if let Some(cex) = attack(sys, deadline) {
        return finish(Verdict::Counterexample(cex), stats);
    }
    while let Some(fixes) = stack.pop() {
        if deadline.is_some_and(|d| Instant::now() >= d) {
            return finish(Verdict::Timeout { open_nodes: stack.len() + 1 + inconclusive }, stats);
        }
        stats.nodes += 1;
        let mut p = base.clone();
        for &(v, val) in &fixes {
            p.lower[v] = val;
            p.upper[v] = val;
        }
        if activity_infeasible(&p) {
            continue;
        }
        stats.lp_calls += 1;
        let point = match lp_feasible_until(&p, deadline) {
            LpOutcome::Infeasible => continue,
            LpOutcome::Feasible(point) => Some(point),
            LpOutcome::Inconclusive => None,
        };
        let is_fixed = |v: usize| fixes.iter().any(|f| f.0 == v);
        let mut branch = None;
        if let Some(point) = &point {
            branch = red
                .order
                .iter()
                .find(|&&v| !is_fixed(v) && (point[v] - point[v].round()).abs() > INTEGRALITY)
                .map(|&v| (v, point[v].round()));
            if branch.is_none() {
                if let Some(cex) = replay(sys, candidate(sys, &red, point)) {
                    return finish(Verdict::Counterexample(cex), stats);
                }
            }
        }
        if branch.is_none() {
            branch = red.order.iter().find(|&&v| !is_fixed(v)).map(|&v| {
                let guess = point.as_ref().map_or(1.0, |pt| pt[v].round().clamp(0.0, 1.0));
                (v, guess)
            });
        }
        match branch {
            Some((v, first)) => {
                let first = first.clamp(0.0, 1.0);
                for val in [1.0 - first, first] {
                    let mut child = fixes.clone();
                    child.push((v, val));
                    stack.push(child);
                }
            }
            None if sys.set.discrete && point.is_some() => {
                // Every input is fixed, so the replay above was exact.
            }
            None => {
                let mut tight = red.problem(sys.tie_break, delta, RETRY_MARGIN);
                for &(v, val) in &fixes {
                    tight.lower[v] = val;
                    tight.upper[v] = val;
                }
                stats.lp_calls += 1;
                // Feasible points of the untightened leaf that fail replay sit
                // within numerical tolerance of a sign boundary or of the
                // strictness margin. Nothing is claimed about such leaves.
                if let LpOutcome::Feasible(pt) = lp_feasible_until(&tight, deadline) {
                    if let Some(cex) = replay(sys, candidate(sys, &red, &pt)) {
                        return finish(Verdict::Counterexample(cex), stats);
                    }
                }
                inconclusive += 1;
            }
        }
    }
    if inconclusive > 0 {
        finish(Verdict::Timeout { open_nodes: inconclusive }, stats)
    } else {
        finish(Verdict::Holds, stats)
    }
}
