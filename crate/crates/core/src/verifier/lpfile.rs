//! CPLEX LP text format: writer and a small reader for round-trip audits.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use super::encode::{ConstraintSystem, VarKind};
use super::lp::Sense;
use crate::error::VerifyError;

fn num(v: f64) -> String {
    // `{}` on f64 is the shortest exact round-trip form.
    if v == 0.0 {
        "0".into()
    } else {
        format!("{v}")
    }
}

fn sense_str(s: Sense) -> &'static str {
    match s {
        Sense::Le => "<=",
        Sense::Ge => ">=",
        Sense::Eq => "=",
    }
}

/// Renders a feasibility problem: a zero objective, one named row per
/// constraint, explicit bounds for every variable and the binary section.
pub fn to_lp_string(system: &ConstraintSystem) -> String {
    let names: Vec<&str> = system.variables.iter().map(|v| v.name.as_str()).collect();
    let mut s = String::new();
    s.push_str("\\ robustness query: target action ");
    let _ = writeln!(s, "{}, {} ball radius {}", system.property.target, system.set.norm.name(), num(system.set.epsilon));
    s.push_str("Minimize\n obj: 0 ");
    s.push_str(names[0]);
    s.push_str("\nSubject To\n");
    for c in &system.constraints {
        let _ = write!(s, " {}:", c.name);
        for (k, &(j, a)) in c.terms.iter().enumerate() {
            let sign = if a < 0.0 { "-" } else if k == 0 { "" } else { "+" };
            if sign.is_empty() {
                let _ = write!(s, " {} {}", num(a.abs()), names[j]);
            } else {
                let _ = write!(s, " {} {} {}", sign, num(a.abs()), names[j]);
            }
        }
        if c.terms.is_empty() {
            let _ = write!(s, " 0 {}", names[0]);
        }
        let _ = writeln!(s, " {} {}", sense_str(c.sense), num(c.rhs));
    }
    s.push_str("Bounds\n");
    for v in &system.variables {
        let _ = writeln!(s, " {} <= {} <= {}", num(v.lower), v.name, num(v.upper));
    }
    let binaries: Vec<&str> = system.variables.iter().filter(|v| v.kind == VarKind::Binary).map(|v| v.name.as_str()).collect();
    if !binaries.is_empty() {
        s.push_str("Binaries\n");
        for chunk in binaries.chunks(8) {
            let _ = writeln!(s, " {}", chunk.join(" "));
        }
    }
    s.push_str("End\n");
    s
}

pub fn export_lp(system: &ConstraintSystem, path: &Path) -> Result<(), VerifyError> {
    std::fs::write(path, to_lp_string(system))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedConstraint {
    pub name: String,
    pub terms: Vec<(String, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedLp {
    pub constraints: Vec<ParsedConstraint>,
    /// `(lower, name, upper)` per bounds line.
    pub bounds: Vec<(f64, String, f64)>,
    pub binaries: BTreeSet<String>,
}

impl ParsedLp {
    /// Every variable named in a constraint or bound.
    pub fn variables(&self) -> BTreeSet<String> {
        let mut out: BTreeSet<String> = self.bounds.iter().map(|b| b.1.clone()).collect();
        for c in &self.constraints {
            out.extend(c.terms.iter().map(|t| t.0.clone()));
        }
        out
    }
}

fn bad(line: usize, msg: &str) -> VerifyError {
    VerifyError::InvalidQuery(format!("LP line {line}: {msg}"))
}

fn parse_f64(tok: &str, line: usize) -> Result<f64, VerifyError> {
    tok.parse().map_err(|_| bad(line, &format!("expected a number, found `{tok}`")))
}

/// Reads the subset of the LP format produced by [`to_lp_string`]: one
/// constraint per line, `coef name` term pairs, double-sided bounds.
pub fn parse_lp(text: &str) -> Result<ParsedLp, VerifyError> {
    #[derive(PartialEq)]
    enum Section {
        None,
        Objective,
        Rows,
        Bounds,
        Binaries,
        End,
    }
    let mut out = ParsedLp::default();
    let mut section = Section::None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('\\').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.to_ascii_lowercase().as_str() {
            "minimize" | "maximize" => {
                section = Section::Objective;
                continue;
            }
            "subject to" | "st" | "s.t." => {
                section = Section::Rows;
                continue;
            }
            "bounds" => {
                section = Section::Bounds;
                continue;
            }
            "binaries" | "binary" => {
                section = Section::Binaries;
                continue;
            }
            "end" => {
                section = Section::End;
                continue;
            }
            _ => {}
        }
        match section {
            Section::Objective => {}
            Section::Rows => {
                let (name, body) = line.split_once(':').ok_or_else(|| bad(line_no, "constraint without a name"))?;
                let toks: Vec<&str> = body.split_whitespace().collect();
                let pos = toks
                    .iter()
                    .position(|t| matches!(*t, "<=" | ">=" | "="))
                    .ok_or_else(|| bad(line_no, "missing relation"))?;
                let sense = match toks[pos] {
                    "<=" => Sense::Le,
                    ">=" => Sense::Ge,
                    _ => Sense::Eq,
                };
                if pos + 2 != toks.len() {
                    return Err(bad(line_no, "expected a single right-hand side"));
                }
                let rhs = parse_f64(toks[pos + 1], line_no)?;
                let mut terms = Vec::new();
                let mut i = 0;
                let lhs = &toks[..pos];
                while i < lhs.len() {
                    let mut sign = 1.0;
                    if lhs[i] == "+" || lhs[i] == "-" {
                        sign = if lhs[i] == "-" { -1.0 } else { 1.0 };
                        i += 1;
                    }
                    if i + 1 >= lhs.len() {
                        return Err(bad(line_no, "dangling term"));
                    }
                    let coef = parse_f64(lhs[i], line_no)?;
                    terms.push((lhs[i + 1].to_string(), sign * coef));
                    i += 2;
                }
                out.constraints.push(ParsedConstraint { name: name.trim().to_string(), terms, sense, rhs });
            }
            Section::Bounds => {
                let toks: Vec<&str> = line.split_whitespace().collect();
                if toks.len() != 5 || toks[1] != "<=" || toks[3] != "<=" {
                    return Err(bad(line_no, "expected `lo <= name <= up`"));
                }
                out.bounds.push((parse_f64(toks[0], line_no)?, toks[2].to_string(), parse_f64(toks[4], line_no)?));
            }
            Section::Binaries => out.binaries.extend(line.split_whitespace().map(str::to_string)),
            Section::None | Section::End => return Err(bad(line_no, "text outside any section")),
        }
    }
    if section != Section::End {
        return Err(VerifyError::InvalidQuery("LP text has no End marker".into()));
    }
    Ok(out)
}
