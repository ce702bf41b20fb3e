//! Dense real-valued kernels shared by the reference path, the full-precision
//! target network and the training tape.

use crate::bits::{binary_dot_unchecked, pack_row_into, words_per_row, BitTensor};

/// Geometry of a valid (unpadded) convolution over an HWC tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn fan_in(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_c
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Calls `f(k, input_index)` for every element of the patch at output
    /// position `p`, in weight order `[ky][kx][c]`.
    #[inline]
    pub fn for_patch(&self, p: usize, mut f: impl FnMut(usize, usize)) {
        let oy = p / self.out_w;
        let ox = p % self.out_w;
        let run = self.kernel_w * self.in_c;
        let mut k = 0;
        for ky in 0..self.kernel_h {
            let base = ((oy * self.stride + ky) * self.in_w + ox * self.stride) * self.in_c;
            for j in 0..run {
                f(k, base + j);
                k += 1;
            }
        }
    }

    /// Copies the patch at position `p` into `out` (length `fan_in`).
    #[inline]
    pub fn gather(&self, x: &[f64], p: usize, out: &mut [f64]) {
        let oy = p / self.out_w;
        let ox = p % self.out_w;
        let run = self.kernel_w * self.in_c;
        for ky in 0..self.kernel_h {
            let base = ((oy * self.stride + ky) * self.in_w + ox * self.stride) * self.in_c;
            out[ky * run..(ky + 1) * run].copy_from_slice(&x[base..base + run]);
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators let the compiler vectorize while keeping
    // a fixed, deterministic summation order.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `pre[o] = Σᵢ w[o,i]·x[i]` (before the per-channel scale).
pub(crate) fn dense_pre(w: &[f64], x: &[f64], out_dim: usize, pre: &mut [f64]) {
    let in_dim = x.len();
    for o in 0..out_dim {
        pre[o] = dot(&w[o * in_dim..(o + 1) * in_dim], x);
    }
}

pub(crate) fn conv_pre(g: &ConvGeometry, w: &[f64], x: &[f64], pre: &mut [f64]) {
    let fan_in = g.fan_in();
    let mut patch = vec![0.0; fan_in];
    for p in 0..g.positions() {
        g.gather(x, p, &mut patch);
        for o in 0..g.out_c {
            pre[p * g.out_c + o] = dot(&w[o * fan_in..(o + 1) * fan_in], &patch);
        }
    }
}

/// Signed sum of a real row against one packed weight row. Mirrors the
/// accumulation order of [`dot`] so packed and reference paths agree bit for bit.
#[inline]
pub(crate) fn signed_sum(bits: &[u64], x: &[f64]) -> f64 {
    let term = |i: usize| {
        if (bits[i / 64] >> (i % 64)) & 1 == 1 {
            x[i]
        } else {
            -x[i]
        }
    };
    let mut acc = [0.0f64; 4];
    let chunks = x.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += term(i);
        acc[1] += term(i + 1);
        acc[2] += term(i + 2);
        acc[3] += term(i + 3);
    }
    let mut tail = 0.0;
    for i in chunks * 4..x.len() {
        tail += term(i);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Packed dense layer on a ±1 input: integer XNOR-popcount dot per row.
pub(crate) fn dense_packed(weights: &BitTensor, x: &[f64], pre: &mut [f64]) {
    let n = x.len();
    let mut packed = vec![0u64; words_per_row(n)];
    pack_row_into(x.iter().map(|&v| v >= 0.0), &mut packed);
    for (o, slot) in pre.iter_mut().enumerate() {
        *slot = binary_dot_unchecked(weights.row(o), &packed, n) as f64;
    }
}

pub(crate) fn conv_packed(g: &ConvGeometry, weights: &BitTensor, x: &[f64], pre: &mut [f64]) {
    let fan_in = g.fan_in();
    let mut packed = vec![0u64; words_per_row(fan_in)];
    for p in 0..g.positions() {
        packed.iter_mut().for_each(|w| *w = 0);
        g.for_patch(p, |k, idx| {
            if x[idx] >= 0.0 {
                packed[k / 64] |= 1u64 << (k % 64);
            }
        });
        for o in 0..g.out_c {
            pre[p * g.out_c + o] = binary_dot_unchecked(weights.row(o), &packed, fan_in) as f64;
        }
    }
}

pub(crate) fn dense_real_input(weights: &BitTensor, x: &[f64], pre: &mut [f64]) {
    for (o, slot) in pre.iter_mut().enumerate() {
        *slot = signed_sum(weights.row(o), x);
    }
}

pub(crate) fn conv_real_input(g: &ConvGeometry, weights: &BitTensor, x: &[f64], pre: &mut [f64]) {
    let mut patch = vec![0.0; g.fan_in()];
    for p in 0..g.positions() {
        g.gather(x, p, &mut patch);
        for o in 0..g.out_c {
            pre[p * g.out_c + o] = signed_sum(weights.row(o), &patch);
        }
    }
}
