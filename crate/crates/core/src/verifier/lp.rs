//! LP feasibility checks for branch-and-bound nodes.
//!
//! Problems are handed to the sparse revised simplex of `microlp` with a zero
//! objective. A returned point is accepted only if it passes our own residual
//! check at [`LP_TOLERANCE`].

use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpRow {
    pub terms: Vec<(usize, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

/// Linear constraints over variables with finite bounds.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LpProblem {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub rows: Vec<LpRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Feasible(Vec<f64>),
    Infeasible,
    /// Time limit, solver failure, or a point that failed the residual check.
    Inconclusive,
}

/// Residual tolerance a returned point satisfies.
pub const LP_TOLERANCE: f64 = 1e-7;

impl LpProblem {
    pub fn add_var(&mut self, lower: f64, upper: f64) -> usize {
        self.lower.push(lower);
        self.upper.push(upper);
        self.lower.len() - 1
    }

    pub fn add_row(&mut self, terms: Vec<(usize, f64)>, sense: Sense, rhs: f64) {
        self.rows.push(LpRow { terms, sense, rhs });
    }

    /// Largest violation of a bound or row by `x`.
    pub fn max_residual(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for ((&v, &l), &u) in x.iter().zip(&self.lower).zip(&self.upper) {
            worst = worst.max(l - v).max(v - u);
        }
        for row in &self.rows {
            let a: f64 = row.terms.iter().map(|&(j, c)| c * x[j]).sum();
            let r = match row.sense {
                Sense::Le => a - row.rhs,
                Sense::Ge => row.rhs - a,
                Sense::Eq => (a - row.rhs).abs(),
            };
            worst = worst.max(r);
        }
        worst
    }
}

pub fn lp_feasible(p: &LpProblem) -> LpOutcome {
    lp_feasible_until(p, None)
}

/// Like [`lp_feasible`], but gives up with `Inconclusive` at `deadline`.
pub fn lp_feasible_until(p: &LpProblem, deadline: Option<Instant>) -> LpOutcome {
    if p.lower.iter().zip(&p.upper).any(|(l, u)| l > u) {
        return LpOutcome::Infeasible;
    }
    let mut q = microlp::Problem::new(microlp::OptimizationDirection::Minimize);
    let vars: Vec<microlp::Variable> = p.lower.iter().zip(&p.upper).map(|(&l, &u)| q.add_var(0.0, (l, u))).collect();
    for row in &p.rows {
        let terms: Vec<(microlp::Variable, f64)> = row.terms.iter().map(|&(j, a)| (vars[j], a)).collect();
        let op = match row.sense {
            Sense::Le => microlp::ComparisonOp::Le,
            Sense::Ge => microlp::ComparisonOp::Ge,
            Sense::Eq => microlp::ComparisonOp::Eq,
        };
        q.add_constraint(terms.as_slice(), op, row.rhs);
    }
    if let Some(d) = deadline {
        let left = d.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return LpOutcome::Inconclusive;
        }
        q.set_time_limit(left);
    }
    match q.solve() {
        Ok(microlp::SolveOutcome::Solution(sol)) => {
            let x: Vec<f64> = vars.iter().zip(p.lower.iter().zip(&p.upper)).map(|(&v, (&l, &u))| sol.var_value(v).clamp(l, u)).collect();
            if p.max_residual(&x) <= LP_TOLERANCE { LpOutcome::Feasible(x) } else { LpOutcome::Inconclusive }
        }
        Err(microlp::Error::Infeasible) => LpOutcome::Infeasible,
        _ => LpOutcome::Inconclusive,
    }
}
