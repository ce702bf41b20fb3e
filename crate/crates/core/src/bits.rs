//! Sign values packed one bit per element.
//!
//! Bit `1` encodes `+1` and bit `0` encodes `-1`. Tensors are stored
//! row-major; every innermost row starts on a fresh 64-bit word and the
//! unused high bits of the last word in a row are always zero. With that
//! layout a ±1 inner product reduces to XOR and popcount:
//!
//! `Σ aᵢbᵢ = n − 2·popcount(a ⊕ b)`, which equals `2·popcount(XNOR(a, b)) − n`
//! over the `n` logical bits.

use crate::error::BnnError;

/// `+1` for `x >= 0` (including `-0.0`), `-1` otherwise.
pub fn sign(x: f64) -> Result<i8, BnnError> {
    if !x.is_finite() {
        return Err(BnnError::NonFinite(x));
    }
    Ok(sign_unchecked(x))
}

#[inline(always)]
pub(crate) fn sign_unchecked(x: f64) -> i8 {
    if x >= 0.0 {
        1
    } else {
        -1
    }
}

#[inline(always)]
pub(crate) fn sign_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Number of 64-bit words needed for a row of `len` bits.
#[inline]
pub fn words_per_row(len: usize) -> usize {
    len.div_ceil(64)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitTensor {
    shape: Vec<usize>,
    words: Vec<u64>,
}

impl BitTensor {
    /// All-minus tensor (every bit zero).
    pub fn zeros(shape: &[usize]) -> Self {
        let (rows, row_len) = split_shape(shape);
        BitTensor {
            shape: shape.to_vec(),
            words: vec![0; rows * words_per_row(row_len)],
        }
    }

    /// Builds a tensor from raw words, checking length and pad bits.
    pub fn from_words(shape: &[usize], words: Vec<u64>) -> Result<Self, BnnError> {
        let (rows, row_len) = split_shape(shape);
        let wpr = words_per_row(row_len);
        if words.len() != rows * wpr {
            return Err(BnnError::Shape(format!(
                "expected {} words for shape {:?}, got {}",
                rows * wpr,
                shape,
                words.len()
            )));
        }
        let t = BitTensor { shape: shape.to_vec(), words };
        if wpr > 0 && row_len % 64 != 0 {
            let mask = !((1u64 << (row_len % 64)) - 1);
            for r in 0..rows {
                if t.words[r * wpr + wpr - 1] & mask != 0 {
                    return Err(BnnError::Shape("nonzero pad bits".into()));
                }
            }
        }
        Ok(t)
    }

    /// Packs a sign vector with the given shape. Every entry must be ±1.
    pub fn from_signs(shape: &[usize], signs: &[i8]) -> Result<Self, BnnError> {
        let (rows, row_len) = split_shape(shape);
        if signs.len() != rows * row_len {
            return Err(BnnError::Shape(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                rows * row_len,
                signs.len()
            )));
        }
        let mut t = BitTensor::zeros(shape);
        let wpr = words_per_row(row_len);
        for r in 0..rows {
            let row = &signs[r * row_len..(r + 1) * row_len];
            for (i, &s) in row.iter().enumerate() {
                match s {
                    1 => t.words[r * wpr + i / 64] |= 1u64 << (i % 64),
                    -1 => {}
                    other => return Err(BnnError::NotASign(other as f64)),
                }
            }
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> usize {
        split_shape(&self.shape).0
    }

    pub fn row_len(&self) -> usize {
        split_shape(&self.shape).1
    }

    pub fn words_per_row(&self) -> usize {
        words_per_row(self.row_len())
    }

    pub fn row(&self, r: usize) -> &[u64] {
        let wpr = self.words_per_row();
        &self.words[r * wpr..(r + 1) * wpr]
    }

    pub fn get(&self, r: usize, i: usize) -> i8 {
        if (self.row(r)[i / 64] >> (i % 64)) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    /// Expands back to ±1 values, row-major.
    pub fn unpack(&self) -> Vec<i8> {
        let (rows, row_len) = split_shape(&self.shape);
        let mut out = Vec::with_capacity(rows * row_len);
        for r in 0..rows {
            for i in 0..row_len {
                out.push(self.get(r, i));
            }
        }
        out
    }
}

fn split_shape(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        None => (1, 0),
        Some((&last, rest)) => (rest.iter().product(), last),
    }
}

/// Packs a flat sign vector into a single row.
pub fn pack_bits(signs: &[i8]) -> Result<BitTensor, BnnError> {
    BitTensor::from_signs(&[signs.len()], signs)
}

/// ±1 inner product of two packed rows holding `n` logical bits each.
pub fn binary_dot(a: &[u64], b: &[u64], n: usize) -> Result<i64, BnnError> {
    let need = words_per_row(n);
    if a.len() != need || b.len() != need {
        return Err(BnnError::Shape(format!(
            "rows of {} and {} words cannot hold exactly {} bits",
            a.len(),
            b.len(),
            n
        )));
    }
    Ok(binary_dot_unchecked(a, b, n))
}

/// Pad bits are zero in both operands, so they never contribute to the XOR.
#[inline]
pub(crate) fn binary_dot_unchecked(a: &[u64], b: &[u64], n: usize) -> i64 {
    let differing: u32 = a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum();
    n as i64 - 2 * differing as i64
}

/// Packs `signs` into `out` (already sized to `words_per_row(signs.len())`).
#[inline]
pub(crate) fn pack_row_into(signs: impl Iterator<Item = bool>, out: &mut [u64]) {
    out.iter_mut().for_each(|w| *w = 0);
    for (i, positive) in signs.enumerate() {
        if positive {
            out[i / 64] |= 1u64 << (i % 64);
        }
    }
}
