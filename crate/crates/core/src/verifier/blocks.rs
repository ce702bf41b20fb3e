//! A binarized network viewed as a chain of affine blocks.
//!
//! Each block is one weighted layer together with the ScaleShift layers that
//! follow it, written as `v = A·u + c`. A block is `signed` when a Sign layer
//! follows; its sign outputs feed the next block.

use crate::bits::sign_f64;
use crate::error::VerifyError;
use crate::network::{BinarizedNetwork, Layer};

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub in_dim: usize,
    /// Sparse rows of `A`, as `(input index, coefficient)` in increasing index order.
    pub rows: Vec<Vec<(usize, f64)>>,
    pub offset: Vec<f64>,
    pub signed: bool,
}

impl Block {
    pub fn out_dim(&self) -> usize {
        self.rows.len()
    }

    pub fn eval(&self, u: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .zip(&self.offset)
            .map(|(row, &c)| row.iter().fold(c, |acc, &(i, a)| acc + a * u[i]))
            .collect()
    }
}

/// Folds `net` into affine blocks. With `unit_hidden_scales`, ScaleShift
/// scales inside signed blocks are replaced by 1; signs are unchanged by this.
pub fn fold(net: &BinarizedNetwork, unit_hidden_scales: bool) -> Result<Vec<Block>, VerifyError> {
    let mut blocks: Vec<Block> = Vec::new();
    let mut pending: Vec<(Vec<f32>, Vec<f32>)> = Vec::new();
    let finish = |blocks: &mut Vec<Block>, pending: &mut Vec<(Vec<f32>, Vec<f32>)>, signed: bool| {
        let Some(block) = blocks.last_mut() else { return };
        for (scale, bias) in pending.drain(..) {
            let c = scale.len();
            for (o, (row, off)) in block.rows.iter_mut().zip(block.offset.iter_mut()).enumerate() {
                let s = if signed && unit_hidden_scales { 1.0 } else { scale[o % c] as f64 };
                let b = bias[o % c] as f64;
                row.iter_mut().for_each(|(_, a)| *a *= s);
                *off = s * (*off + b);
            }
        }
        block.signed = signed;
    };
    for layer in net.layers() {
        match layer {
            Layer::Dense { params } => {
                let signed = blocks.last().is_some_and(|b| b.signed);
                if signed && !pending.is_empty() {
                    return Err(VerifyError::Internal("ScaleShift between Sign and a weighted layer".into()));
                }
                finish(&mut blocks, &mut pending, signed);
                let n = params.fan_in();
                let rows = (0..params.scales.len())
                    .map(|o| (0..n).map(|i| (i, params.scales[o] as f64 * params.bits.get(o, i) as f64)).collect())
                    .collect();
                blocks.push(Block { in_dim: n, rows, offset: vec![0.0; params.scales.len()], signed: false });
            }
            Layer::Conv { geometry: g, params } => {
                let signed = blocks.last().is_some_and(|b| b.signed);
                if signed && !pending.is_empty() {
                    return Err(VerifyError::Internal("ScaleShift between Sign and a weighted layer".into()));
                }
                finish(&mut blocks, &mut pending, signed);
                let mut rows = Vec::with_capacity(g.positions() * g.out_c);
                for p in 0..g.positions() {
                    for o in 0..g.out_c {
                        let mut row = Vec::with_capacity(g.fan_in());
                        let a = params.scales[o] as f64;
                        g.for_patch(p, |k, idx| row.push((idx, a * params.bits.get(o, k) as f64)));
                        row.sort_by_key(|&(i, _)| i);
                        rows.push(row);
                    }
                }
                let len = rows.len();
                blocks.push(Block { in_dim: g.in_h * g.in_w * g.in_c, rows, offset: vec![0.0; len], signed: false });
            }
            Layer::ScaleShift { scale, bias } => pending.push((scale.clone(), bias.clone())),
            Layer::Sign => {
                if blocks.last().is_none_or(|b| b.signed) {
                    return Err(VerifyError::Internal("Sign without a preceding weighted layer".into()));
                }
                finish(&mut blocks, &mut pending, true)
            }
        }
    }
    finish(&mut blocks, &mut pending, false);
    if blocks.is_empty() || blocks.last().unwrap().signed {
        return Err(VerifyError::Internal("network does not end in an affine block".into()));
    }
    Ok(blocks)
}

/// Pre-activations of every block for input `x`.
pub fn eval_blocks(blocks: &[Block], x: &[f64]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(blocks.len());
    let mut u = x.to_vec();
    for b in blocks {
        let v = b.eval(&u);
        u = if b.signed { v.iter().map(|&t| sign_f64(t)).collect() } else { v.clone() };
        out.push(v);
    }
    out
}
