//! Model container.
//!
//! ```text
//! "BQN1" | version u16 | layer count u16 | input h, w, c: u32
//! per layer: kind u8, then
//!   1 BinaryDense:   in_dim u32, out_dim u32, scales f32[out], words u64[..]
//!   2 BinaryConv2d:  in_c, out_c, kernel_h, kernel_w, stride: u32, scales f32[out], words u64[..]
//!   3 Sign:          (no fields)
//!   4 ScaleShift:    channels u32, scale f32[c], bias f32[c]
//! optional 0xFF latents:   per weighted layer, count u32 + f32[count]
//! optional 0xFE optimizer: lr, decay, eps: f32, groups u32, per group count u32 + f32[count]
//! CRC32 (IEEE) of every preceding byte, u32
//! ```
//! All integers and floats are little-endian.

use super::{conv_geometry, BinarizedNetwork, Layer, Shape3, WeightedParams};
use crate::bits::{words_per_row, BitTensor};
use crate::error::FormatError;

pub const MAGIC: &[u8; 4] = b"BQN1";
pub const VERSION: u16 = 1;

const TAG_DENSE: u8 = 1;
const TAG_CONV: u8 = 2;
const TAG_SIGN: u8 = 3;
const TAG_SHIFT: u8 = 4;
const TAG_LATENT: u8 = 0xFF;
const TAG_OPTIMIZER: u8 = 0xFE;

/// RMSProp state as stored in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSection {
    pub learning_rate: f32,
    pub decay: f32,
    pub epsilon: f32,
    pub averages: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, Default)]
pub struct SaveOptions<'a> {
    pub include_latents: bool,
    pub optimizer: Option<&'a OptimizerSection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub network: BinarizedNetwork,
    pub optimizer: Option<OptimizerSection>,
}

/// Serializes with latents when the network has them.
pub fn serialize(net: &BinarizedNetwork) -> Vec<u8> {
    serialize_with(net, &SaveOptions { include_latents: net.has_latents(), optimizer: None })
}

pub fn serialize_with(net: &BinarizedNetwork, opts: &SaveOptions<'_>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(net.layers.len() as u16).to_le_bytes());
    let s = net.input_shape;
    for d in [s.h, s.w, s.c] {
        put_u32(&mut out, d);
    }
    for layer in &net.layers {
        match layer {
            Layer::Dense { params } => {
                out.push(TAG_DENSE);
                put_u32(&mut out, params.fan_in());
                put_u32(&mut out, params.out_dim());
                put_weighted(&mut out, params);
            }
            Layer::Conv { geometry: g, params } => {
                out.push(TAG_CONV);
                for d in [g.in_c, g.out_c, g.kernel_h, g.kernel_w, g.stride] {
                    put_u32(&mut out, d);
                }
                put_weighted(&mut out, params);
            }
            Layer::Sign => out.push(TAG_SIGN),
            Layer::ScaleShift { scale, bias } => {
                out.push(TAG_SHIFT);
                put_u32(&mut out, scale.len());
                put_f32s(&mut out, scale);
                put_f32s(&mut out, bias);
            }
        }
    }
    if opts.include_latents && net.has_latents() {
        out.push(TAG_LATENT);
        for p in net.layers.iter().filter_map(Layer::weighted) {
            let latent = p.latent.as_ref().expect("checked by has_latents");
            put_u32(&mut out, latent.len());
            put_f32s(&mut out, latent);
        }
    }
    if let Some(opt) = opts.optimizer {
        out.push(TAG_OPTIMIZER);
        put_f32s(&mut out, &[opt.learning_rate, opt.decay, opt.epsilon]);
        put_u32(&mut out, opt.averages.len());
        for g in &opt.averages {
            put_u32(&mut out, g.len());
            put_f32s(&mut out, g);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn deserialize(bytes: &[u8]) -> Result<BinarizedNetwork, FormatError> {
    decode(bytes).map(|f| f.network)
}

pub fn decode(bytes: &[u8]) -> Result<ModelFile, FormatError> {
    const HEADER: usize = 4 + 2 + 2 + 12;
    if bytes.len() < 4 {
        return Err(FormatError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    if bytes.len() < 6 {
        return Err(FormatError::Truncated);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    if bytes.len() < HEADER + 4 {
        return Err(FormatError::Truncated);
    }
    let (body, footer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(footer.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed });
    }

    let mut r = Reader { buf: body, pos: 6 };
    let layer_count = r.u16()? as usize;
    let input = Shape3::new(r.u32()?, r.u32()?, r.u32()?);
    let mut layers = Vec::with_capacity(layer_count);
    let mut shape = input;
    for _ in 0..layer_count {
        let layer = match r.u8()? {
            TAG_DENSE => {
                let in_dim = r.u32()?;
                let out_dim = r.u32()?;
                let params = r.weighted(out_dim, in_dim)?;
                shape = Shape3::flat(out_dim);
                Layer::Dense { params }
            }
            TAG_CONV => {
                let (in_c, out_c, kh, kw, stride) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
                let g = conv_geometry(shape, in_c, out_c, kh, kw, stride)?;
                let params = r.weighted(out_c, g.fan_in())?;
                shape = Shape3::new(g.out_h, g.out_w, g.out_c);
                Layer::Conv { geometry: g, params }
            }
            TAG_SIGN => Layer::Sign,
            TAG_SHIFT => {
                let c = r.u32()?;
                Layer::ScaleShift { scale: r.f32s(c)?, bias: r.f32s(c)? }
            }
            tag => return Err(FormatError::Malformed(format!("unknown layer tag {tag:#04x}"))),
        };
        layers.push(layer);
    }
    let mut optimizer = None;
    while r.pos < body.len() {
        match r.u8()? {
            TAG_LATENT => {
                for p in layers.iter_mut().filter_map(Layer::weighted_mut) {
                    let n = r.u32()?;
                    if n != p.bits.len() {
                        return Err(FormatError::Malformed("latent count differs from weight count".into()));
                    }
                    p.latent = Some(r.f32s(n)?);
                }
            }
            TAG_OPTIMIZER => {
                let hyper = r.f32s(3)?;
                let groups = r.u32()?;
                let mut averages = Vec::with_capacity(groups.min(1024));
                for _ in 0..groups {
                    let n = r.u32()?;
                    averages.push(r.f32s(n)?);
                }
                optimizer = Some(OptimizerSection {
                    learning_rate: hyper[0],
                    decay: hyper[1],
                    epsilon: hyper[2],
                    averages,
                });
            }
            tag => return Err(FormatError::Malformed(format!("unknown section tag {tag:#04x}"))),
        }
    }
    Ok(ModelFile { network: BinarizedNetwork::new(input, layers)?, optimizer })
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_weighted(out: &mut Vec<u8>, p: &WeightedParams) {
    put_f32s(out, &p.scales);
    for w in p.bits.words() {
        out.extend_from_slice(&w.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated)?;
        if end > self.buf.len() {
            return Err(FormatError::Truncated);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<usize, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let raw = self.take(n.checked_mul(4).ok_or(FormatError::Truncated)?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn weighted(&mut self, rows: usize, fan_in: usize) -> Result<WeightedParams, FormatError> {
        let scales = self.f32s(rows)?;
        let n = rows.checked_mul(words_per_row(fan_in)).ok_or(FormatError::Truncated)?;
        let raw = self.take(n.checked_mul(8).ok_or(FormatError::Truncated)?)?;
        let words = raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let bits = BitTensor::from_words(&[rows, fan_in], words)?;
        Ok(WeightedParams { bits, scales, latent: None })
    }
}
