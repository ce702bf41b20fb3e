//! Interval bounds on block pre-activations over an input set.

use super::blocks::Block;
use super::{InputSet, Norm};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub up: f64,
}

impl Interval {
    pub fn width(&self) -> f64 {
        self.up - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.up
    }

    /// Sign value fixed over the whole interval, if any.
    pub fn stable_sign(&self) -> Option<f64> {
        if self.lo >= 0.0 {
            Some(1.0)
        } else if self.up < 0.0 {
            Some(-1.0)
        } else {
            None
        }
    }
}

/// Per-block, per-unit pre-activation intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub layers: Vec<Vec<Interval>>,
}

impl Bounds {
    pub fn unstable_count(&self, blocks: &[Block]) -> usize {
        self.layers
            .iter()
            .zip(blocks)
            .filter(|(_, b)| b.signed)
            .map(|(l, _)| l.iter().filter(|i| i.stable_sign().is_none()).count())
            .sum()
    }
}

/// Widening applied to every computed bound so floating-point reordering in
/// the forward pass cannot step outside it.
fn widen(lo: f64, up: f64) -> Interval {
    let pad = |v: f64| 1e-9 * (1.0 + v.abs());
    Interval { lo: lo - pad(lo), up: up + pad(up) }
}

/// Exact range of `row·x` over the ℓ1 ball intersected with the coordinate box:
/// spend the budget on the largest coefficients first.
fn l1_range(
    row: &[(usize, f64)],
    center: &[f64],
    boxes: &[(f64, f64)],
    eps: f64,
    scratch: &mut Vec<(f64, f64, f64)>,
) -> (f64, f64) {
    let base: f64 = row.iter().map(|&(i, a)| a * center[i]).sum();
    // (|a|, room moving in the increasing direction, room moving in the decreasing direction)
    scratch.clear();
    scratch.extend(row.iter().map(|&(i, a)| {
        let (up_room, down_room) = (boxes[i].1 - center[i], center[i] - boxes[i].0);
        if a >= 0.0 {
            (a, up_room, down_room)
        } else {
            (-a, down_room, up_room)
        }
    }));
    scratch.sort_by(|x, y| y.0.total_cmp(&x.0));
    let spend = |pick: fn(&(f64, f64, f64)) -> f64| {
        let mut budget = eps;
        let mut gain = 0.0;
        for e in scratch.iter() {
            if budget <= 0.0 {
                break;
            }
            let step = pick(e).min(budget);
            gain += e.0 * step;
            budget -= step;
        }
        gain
    };
    let inc = spend(|e| e.1);
    let dec = spend(|e| e.2);
    (base - dec, base + inc)
}

pub fn propagate(blocks: &[Block], set: &InputSet) -> Bounds {
    let center: Vec<f64> = set.center.iter().map(|&v| v as f64).collect();
    let boxes = set.coordinate_box();
    let mut layers = Vec::with_capacity(blocks.len());
    let mut scratch = Vec::new();
    let mut input: Vec<Interval> = boxes.iter().map(|&(lo, up)| Interval { lo, up }).collect();
    for (k, block) in blocks.iter().enumerate() {
        let out: Vec<Interval> = block
            .rows
            .iter()
            .zip(&block.offset)
            .map(|(row, &c)| {
                if k == 0 && set.norm == Norm::L1 {
                    let (lo, up) = l1_range(row, &center, &boxes, set.epsilon, &mut scratch);
                    return widen(c + lo, c + up);
                }
                let (mut lo, mut up) = (c, c);
                for &(i, a) in row {
                    let iv = input[i];
                    if a >= 0.0 {
                        lo += a * iv.lo;
                        up += a * iv.up;
                    } else {
                        lo += a * iv.up;
                        up += a * iv.lo;
                    }
                }
                widen(lo, up)
            })
            .collect();
        input = if block.signed {
            out.iter()
                .map(|iv| match iv.stable_sign() {
                    Some(s) => Interval { lo: s, up: s },
                    None => Interval { lo: -1.0, up: 1.0 },
                })
                .collect()
        } else {
            out.clone()
        };
        layers.push(out);
    }
    Bounds { layers }
}
