//! Binarized networks: layer stacks with ±1 weights stored as packed bits,
//! positive per-channel scales, and optional full-precision latent weights.

mod format;
pub(crate) mod kernels;
pub mod presets;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::bits::{sign_f64, BitTensor};
use crate::error::BnnError;

pub use format::{decode, deserialize, serialize, serialize_with, ModelFile, OptimizerSection, SaveOptions, MAGIC, VERSION};
pub use kernels::ConvGeometry;

/// Scales never drop below this value.
pub const SCALE_FLOOR: f32 = 1e-6;

/// Activation shape in height, width, channel order. Dense outputs are `(1, 1, n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape3 {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape3 {
    pub const fn new(h: usize, w: usize, c: usize) -> Self {
        Shape3 { h, w, c }
    }

    pub const fn flat(n: usize) -> Self {
        Shape3 { h: 1, w: 1, c: n }
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.c)
    }
}

/// Architecture description of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    BinaryDense { in_dim: usize, out_dim: usize },
    BinaryConv2d { in_channels: usize, out_channels: usize, kernel_h: usize, kernel_w: usize, stride: usize },
    SignActivation,
    /// Folded batch normalization: `y = scale·(x + bias)` per channel.
    ScaleShift { channels: usize },
}

impl LayerSpec {
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerSpec::BinaryDense { .. } | LayerSpec::BinaryConv2d { .. })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::BinaryDense { .. } => "BinaryDense",
            LayerSpec::BinaryConv2d { .. } => "BinaryConv2d",
            LayerSpec::SignActivation => "SignActivation",
            LayerSpec::ScaleShift { .. } => "ScaleShift",
        }
    }
}

/// Weights of a dense or convolutional layer, one row per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedParams {
    pub bits: BitTensor,
    pub scales: Vec<f32>,
    pub latent: Option<Vec<f32>>,
}

impl WeightedParams {
    pub fn out_dim(&self) -> usize {
        self.bits.rows()
    }

    pub fn fan_in(&self) -> usize {
        self.bits.row_len()
    }

    /// Re-derives the packed signs from the latent weights.
    pub fn refresh_bits(&mut self) -> Result<(), BnnError> {
        let latent = self.latent.as_ref().ok_or(BnnError::MissingLatents)?;
        let signs: Vec<i8> = latent.iter().map(|&l| if l >= 0.0 { 1 } else { -1 }).collect();
        self.bits = BitTensor::from_signs(&[self.out_dim(), self.fan_in()], &signs)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense { params: WeightedParams },
    Conv { geometry: ConvGeometry, params: WeightedParams },
    Sign,
    ScaleShift { scale: Vec<f32>, bias: Vec<f32> },
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense { params } => LayerSpec::BinaryDense { in_dim: params.fan_in(), out_dim: params.out_dim() },
            Layer::Conv { geometry: g, .. } => LayerSpec::BinaryConv2d {
                in_channels: g.in_c,
                out_channels: g.out_c,
                kernel_h: g.kernel_h,
                kernel_w: g.kernel_w,
                stride: g.stride,
            },
            Layer::Sign => LayerSpec::SignActivation,
            Layer::ScaleShift { scale, .. } => LayerSpec::ScaleShift { channels: scale.len() },
        }
    }

    pub fn weighted(&self) -> Option<&WeightedParams> {
        match self {
            Layer::Dense { params } | Layer::Conv { params, .. } => Some(params),
            _ => None,
        }
    }

    pub fn weighted_mut(&mut self) -> Option<&mut WeightedParams> {
        match self {
            Layer::Dense { params } | Layer::Conv { params, .. } => Some(params),
            _ => None,
        }
    }
}

static STAMP: AtomicU64 = AtomicU64::new(1);

fn next_stamp() -> u64 {
    STAMP.fetch_add(1, Ordering::Relaxed)
}

/// A network whose weights are ±1, with real per-channel scales.
///
/// The first weighted layer reads real pixels; every later weighted layer
/// reads the ±1 output of a `Sign`. The last layer emits real Q-values.
#[derive(Debug, Clone)]
pub struct BinarizedNetwork {
    input_shape: Shape3,
    layers: Vec<Layer>,
    shapes: Vec<Shape3>,
    stamp: u64,
}

impl PartialEq for BinarizedNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape && self.layers == other.layers
    }
}

/// Latent weight initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitOptions {
    /// Latents are drawn uniformly from `[-latent_range, latent_range]`.
    pub latent_range: f32,
    /// Multiplier on the `1/(α·√fan_in)` scale given to ScaleShift layers.
    pub shift_gain: f32,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions { latent_range: 1.0, shift_gain: 1.0 }
    }
}

impl BinarizedNetwork {
    /// Assembles and validates a network from prepared layers.
    pub fn new(input_shape: Shape3, layers: Vec<Layer>) -> Result<Self, BnnError> {
        let shapes = validate(input_shape, &layers)?;
        Ok(BinarizedNetwork { input_shape, layers, shapes, stamp: next_stamp() })
    }

    /// Random initialization: latents uniform, bits = sign(latent), α = mean|latent|.
    pub fn random(
        input_shape: Shape3,
        specs: &[LayerSpec],
        init: InitOptions,
        rng: &mut impl Rng,
    ) -> Result<Self, BnnError> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input_shape;
        let mut last_fan_in = 1usize;
        let mut last_alpha = 1.0f32;
        for spec in specs {
            let (layer, next) = match *spec {
                LayerSpec::BinaryDense { in_dim, out_dim } => {
                    if in_dim != shape.len() {
                        return Err(BnnError::Architecture(format!(
                            "dense expects {in_dim} inputs, previous layer yields {}",
                            shape.len()
                        )));
                    }
                    let latent = random_latents(out_dim * in_dim, init.latent_range, rng);
                    let (bits, scales) = binarize_params(&latent, out_dim)?;
                    last_fan_in = in_dim;
                    last_alpha = mean(&scales);
                    (Layer::Dense { params: WeightedParams { bits, scales, latent: Some(latent) } }, Shape3::flat(out_dim))
                }
                LayerSpec::BinaryConv2d { in_channels, out_channels, kernel_h, kernel_w, stride } => {
                    let g = conv_geometry(shape, in_channels, out_channels, kernel_h, kernel_w, stride)?;
                    let latent = random_latents(out_channels * g.fan_in(), init.latent_range, rng);
                    let (bits, scales) = binarize_params(&latent, out_channels)?;
                    last_fan_in = g.fan_in();
                    last_alpha = mean(&scales);
                    let next = Shape3::new(g.out_h, g.out_w, g.out_c);
                    (Layer::Conv { geometry: g, params: WeightedParams { bits, scales, latent: Some(latent) } }, next)
                }
                LayerSpec::SignActivation => (Layer::Sign, shape),
                LayerSpec::ScaleShift { channels } => {
                    let s = init.shift_gain / (last_alpha.max(SCALE_FLOOR) * (last_fan_in as f32).sqrt());
                    (Layer::ScaleShift { scale: vec![s.max(SCALE_FLOOR); channels], bias: vec![0.0; channels] }, shape)
                }
            };
            layers.push(layer);
            shape = next;
        }
        BinarizedNetwork::new(input_shape, layers)
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Activation shapes: entry `k` is the input of layer `k`; the last entry is the output.
    pub fn shapes(&self) -> &[Shape3] {
        &self.shapes
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().map(Shape3::len).unwrap_or(0)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn has_latents(&self) -> bool {
        self.layers.iter().filter_map(Layer::weighted).all(|p| p.latent.is_some())
    }

    /// Changes whenever parameters are mutated through [`Self::layers_mut`].
    pub fn stamp(&self) -> u64 {
        self.stamp
    }

    /// Mutable access to the layers. Invalidates outstanding gradient tapes.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.stamp = next_stamp();
        &mut self.layers
    }

    /// Drops latent weights, leaving an inference-only network.
    pub fn without_latents(&self) -> Self {
        let mut out = self.clone();
        for p in out.layers.iter_mut().filter_map(Layer::weighted_mut) {
            p.latent = None;
        }
        out
    }

    /// Hash of all parameters, for staleness checks.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense { params } | Layer::Conv { params, .. } => {
                    params.bits.hash(&mut h);
                    params.scales.iter().for_each(|s| s.to_bits().hash(&mut h));
                    if let Some(l) = &params.latent {
                        l.iter().for_each(|s| s.to_bits().hash(&mut h));
                    }
                }
                Layer::Sign => 0u8.hash(&mut h),
                Layer::ScaleShift { scale, bias } => {
                    scale.iter().chain(bias).for_each(|s| s.to_bits().hash(&mut h));
                }
            }
        }
        h.finish()
    }

    fn check_input(&self, input: &[f32]) -> Result<(), BnnError> {
        if input.len() != self.input_shape.len() {
            return Err(BnnError::Shape(format!(
                "input has {} values, network expects {} ({})",
                input.len(),
                self.input_shape.len(),
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Bit-packed forward pass. Binary-input layers use XNOR-popcount.
    pub fn forward(&self, input: &[f32]) -> Result<Vec<f64>, BnnError> {
        self.check_input(input)?;
        let mut x: Vec<f64> = input.iter().map(|&v| v as f64).collect();
        let mut binary_input = false;
        for (k, layer) in self.layers.iter().enumerate() {
            let out_len = self.shapes[k + 1].len();
            match layer {
                Layer::Dense { params } => {
                    let mut pre = vec![0.0; out_len];
                    if binary_input {
                        kernels::dense_packed(&params.bits, &x, &mut pre);
                    } else {
                        kernels::dense_real_input(&params.bits, &x, &mut pre);
                    }
                    apply_channel_scale(&mut pre, &params.scales);
                    x = pre;
                    binary_input = false;
                }
                Layer::Conv { geometry, params } => {
                    let mut pre = vec![0.0; out_len];
                    if binary_input {
                        kernels::conv_packed(geometry, &params.bits, &x, &mut pre);
                    } else {
                        kernels::conv_real_input(geometry, &params.bits, &x, &mut pre);
                    }
                    apply_channel_scale(&mut pre, &params.scales);
                    x = pre;
                    binary_input = false;
                }
                Layer::Sign => {
                    x.iter_mut().for_each(|v| *v = sign_f64(*v));
                    binary_input = true;
                }
                Layer::ScaleShift { scale, bias } => {
                    apply_scale_shift(&mut x, scale, bias);
                    binary_input = false;
                }
            }
        }
        Ok(x)
    }

    /// Real-arithmetic forward with the binary weights expanded to ±1.
    pub fn forward_reference(&self, input: &[f32]) -> Result<Vec<f64>, BnnError> {
        self.check_input(input)?;
        self.to_full_precision(WeightSource::Signs)?.forward(input)
    }

    /// Output of every layer along the real-arithmetic reference path.
    pub fn trace(&self, input: &[f32]) -> Result<Vec<Vec<f64>>, BnnError> {
        self.check_input(input)?;
        self.to_full_precision(WeightSource::Signs)?.trace(input)
    }

    /// Index of the largest Q-value; ties go to the lowest index.
    pub fn greedy_action(&self, input: &[f32]) -> Result<usize, BnnError> {
        Ok(argmax(&self.forward(input)?))
    }

    /// Full-precision view with the same layer stack.
    pub fn to_full_precision(&self, source: WeightSource) -> Result<FullPrecisionNetwork, BnnError> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let fp = match layer {
                Layer::Dense { params } | Layer::Conv { params, .. } => {
                    let (weights, scales) = source.realize(params)?;
                    match layer {
                        Layer::Dense { .. } => FpLayer::Dense { in_dim: params.fan_in(), weights, scales },
                        Layer::Conv { geometry, .. } => FpLayer::Conv { geometry: *geometry, weights, scales },
                        _ => unreachable!(),
                    }
                }
                Layer::Sign => FpLayer::Sign,
                Layer::ScaleShift { scale, bias } => FpLayer::ScaleShift {
                    scale: scale.iter().map(|&v| v as f64).collect(),
                    bias: bias.iter().map(|&v| v as f64).collect(),
                },
            };
            layers.push(fp);
        }
        Ok(FullPrecisionNetwork { input_shape: self.input_shape, layers, shapes: self.shapes.clone() })
    }

    /// Parameter and storage accounting.
    pub fn memory_report(&self) -> MemoryReport {
        let mut r = MemoryReport::default();
        for layer in &self.layers {
            match layer {
                Layer::Dense { params } | Layer::Conv { params, .. } => {
                    r.weights += params.bits.len();
                    r.packed_weight_bytes += params.bits.words().len() * 8;
                    r.channel_params += params.scales.len();
                }
                Layer::ScaleShift { scale, bias } => r.channel_params += scale.len() + bias.len(),
                Layer::Sign => {}
            }
        }
        r
    }
}

/// How a full-precision view obtains its real weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSource {
    /// `w = sign(latent)` with the learned scales: identical to the binarized forward.
    Signs,
    /// `w = latent` with the learned scales, i.e. `α·w` in place of `α·sign(w)`.
    Latents,
}

impl WeightSource {
    fn realize(self, params: &WeightedParams) -> Result<(Vec<f64>, Vec<f64>), BnnError> {
        match self {
            WeightSource::Signs => {
                let weights = params.bits.unpack().into_iter().map(|s| s as f64).collect();
                Ok((weights, params.scales.iter().map(|&s| s as f64).collect()))
            }
            WeightSource::Latents => {
                let latent = params.latent.as_ref().ok_or(BnnError::MissingLatents)?;
                Ok((latent.iter().map(|&v| v as f64).collect(), params.scales.iter().map(|&s| s as f64).collect()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MemoryReport {
    /// Number of ±1 weights.
    pub weights: usize,
    /// Per-channel reals: weighted-layer scales plus ScaleShift scale and bias.
    pub channel_params: usize,
    pub packed_weight_bytes: usize,
}

impl MemoryReport {
    /// Bytes of the binarized model: packed weights plus binary32 channel parameters.
    pub fn binary_bytes(&self) -> usize {
        self.packed_weight_bytes + 4 * self.channel_params
    }

    /// Bytes of the same architecture with every parameter stored as binary32.
    pub fn float_bytes(&self) -> usize {
        4 * (self.weights + self.channel_params)
    }

    pub fn ratio(&self) -> f64 {
        self.float_bytes() as f64 / self.binary_bytes().max(1) as f64
    }

    /// Weight payload only: binary32 weights over packed weights.
    pub fn weight_ratio(&self) -> f64 {
        (4 * self.weights) as f64 / self.packed_weight_bytes.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FpLayer {
    Dense { in_dim: usize, weights: Vec<f64>, scales: Vec<f64> },
    Conv { geometry: ConvGeometry, weights: Vec<f64>, scales: Vec<f64> },
    Sign,
    ScaleShift { scale: Vec<f64>, bias: Vec<f64> },
}

/// Same layer stack as a [`BinarizedNetwork`] but with real weights. Used as
/// the target network and as the reference path for the packed kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct FullPrecisionNetwork {
    input_shape: Shape3,
    layers: Vec<FpLayer>,
    shapes: Vec<Shape3>,
}

impl FullPrecisionNetwork {
    pub fn input_shape(&self) -> Shape3 {
        self.input_shape
    }

    pub fn layers(&self) -> &[FpLayer] {
        &self.layers
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().map(Shape3::len).unwrap_or(0)
    }

    /// True when both networks share the same layer kinds and dimensions.
    pub fn same_architecture(&self, net: &BinarizedNetwork) -> bool {
        self.input_shape == net.input_shape
            && self.shapes == net.shapes
            && self.layers.len() == net.layers.len()
            && self.layers.iter().zip(&net.layers).all(|(a, b)| {
                matches!(
                    (a, b),
                    (FpLayer::Dense { .. }, Layer::Dense { .. })
                        | (FpLayer::Conv { .. }, Layer::Conv { .. })
                        | (FpLayer::Sign, Layer::Sign)
                        | (FpLayer::ScaleShift { .. }, Layer::ScaleShift { .. })
                )
            })
    }

    pub fn forward(&self, input: &[f32]) -> Result<Vec<f64>, BnnError> {
        self.run(input, None)
    }

    /// Output of every layer, in order; the last entry is the forward result.
    pub fn trace(&self, input: &[f32]) -> Result<Vec<Vec<f64>>, BnnError> {
        let mut outputs = Vec::with_capacity(self.layers.len());
        self.run(input, Some(&mut outputs))?;
        Ok(outputs)
    }

    fn run(&self, input: &[f32], mut keep: Option<&mut Vec<Vec<f64>>>) -> Result<Vec<f64>, BnnError> {
        if input.len() != self.input_shape.len() {
            return Err(BnnError::Shape(format!(
                "input has {} values, network expects {}",
                input.len(),
                self.input_shape.len()
            )));
        }
        let mut x: Vec<f64> = input.iter().map(|&v| v as f64).collect();
        for (k, layer) in self.layers.iter().enumerate() {
            let out_len = self.shapes[k + 1].len();
            match layer {
                FpLayer::Dense { weights, scales, .. } => {
                    let mut pre = vec![0.0; out_len];
                    kernels::dense_pre(weights, &x, out_len, &mut pre);
                    apply_channel_scale_f64(&mut pre, scales);
                    x = pre;
                }
                FpLayer::Conv { geometry, weights, scales } => {
                    let mut pre = vec![0.0; out_len];
                    kernels::conv_pre(geometry, weights, &x, &mut pre);
                    apply_channel_scale_f64(&mut pre, scales);
                    x = pre;
                }
                FpLayer::Sign => x.iter_mut().for_each(|v| *v = sign_f64(*v)),
                FpLayer::ScaleShift { scale, bias } => {
                    let c = scale.len();
                    for (i, v) in x.iter_mut().enumerate() {
                        *v = scale[i % c] * (*v + bias[i % c]);
                    }
                }
            }
            if let Some(out) = keep.as_mut() {
                out.push(x.clone());
            }
        }
        Ok(x)
    }
}

/// Binarizes latent rows: `bits = sign(latent)`, `scale = max(mean|latent|, 1e-6)` per row.
pub fn binarize_params(latent: &[f32], rows: usize) -> Result<(BitTensor, Vec<f32>), BnnError> {
    if latent.is_empty() || rows == 0 {
        return Err(BnnError::EmptyTensor);
    }
    if latent.len() % rows != 0 {
        return Err(BnnError::Shape(format!("{} latents do not split into {rows} rows", latent.len())));
    }
    if let Some(bad) = latent.iter().find(|v| !v.is_finite()) {
        return Err(BnnError::NonFinite(*bad as f64));
    }
    let fan_in = latent.len() / rows;
    let signs: Vec<i8> = latent.iter().map(|&l| if l >= 0.0 { 1 } else { -1 }).collect();
    let bits = BitTensor::from_signs(&[rows, fan_in], &signs)?;
    let scales = latent
        .chunks(fan_in)
        .map(|row| {
            let m = row.iter().map(|v| v.abs() as f64).sum::<f64>() / fan_in as f64;
            (m as f32).max(SCALE_FLOOR)
        })
        .collect();
    Ok((bits, scales))
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn mean(v: &[f32]) -> f32 {
    v.iter().sum::<f32>() / v.len().max(1) as f32
}

fn random_latents(n: usize, range: f32, rng: &mut impl Rng) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-range..=range)).collect()
}

fn apply_channel_scale(pre: &mut [f64], scales: &[f32]) {
    let c = scales.len();
    for (i, v) in pre.iter_mut().enumerate() {
        *v *= scales[i % c] as f64;
    }
}

fn apply_channel_scale_f64(pre: &mut [f64], scales: &[f64]) {
    let c = scales.len();
    for (i, v) in pre.iter_mut().enumerate() {
        *v *= scales[i % c];
    }
}

pub(crate) fn apply_scale_shift(x: &mut [f64], scale: &[f32], bias: &[f32]) {
    let c = scale.len();
    for (i, v) in x.iter_mut().enumerate() {
        *v = scale[i % c] as f64 * (*v + bias[i % c] as f64);
    }
}

pub(crate) fn conv_geometry(
    input: Shape3,
    in_channels: usize,
    out_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
) -> Result<ConvGeometry, BnnError> {
    if in_channels != input.c {
        return Err(BnnError::Architecture(format!(
            "conv expects {in_channels} channels, input has {}",
            input.c
        )));
    }
    if stride == 0 || kernel_h == 0 || kernel_w == 0 || out_channels == 0 {
        return Err(BnnError::Architecture("conv kernel, stride and channels must be positive".into()));
    }
    if kernel_h > input.h || kernel_w > input.w {
        return Err(BnnError::Architecture(format!(
            "kernel {kernel_h}x{kernel_w} larger than input {}x{}",
            input.h, input.w
        )));
    }
    Ok(ConvGeometry {
        in_h: input.h,
        in_w: input.w,
        in_c: input.c,
        out_c: out_channels,
        kernel_h,
        kernel_w,
        stride,
        out_h: (input.h - kernel_h) / stride + 1,
        out_w: (input.w - kernel_w) / stride + 1,
    })
}

fn validate(input: Shape3, layers: &[Layer]) -> Result<Vec<Shape3>, BnnError> {
    if input.is_empty() {
        return Err(BnnError::Architecture("empty input shape".into()));
    }
    match layers.first() {
        None => return Err(BnnError::Architecture("no layers".into())),
        Some(l) if l.weighted().is_none() => {
            return Err(BnnError::Architecture("first layer must be BinaryDense or BinaryConv2d".into()))
        }
        _ => {}
    }
    if matches!(layers.last(), Some(Layer::Sign)) {
        return Err(BnnError::Architecture("last layer must produce real Q-values, not signs".into()));
    }
    let mut shapes = vec![input];
    let mut shape = input;
    for (k, layer) in layers.iter().enumerate() {
        if k > 0 && layer.weighted().is_some() && !matches!(layers[k - 1], Layer::Sign) {
            return Err(BnnError::Architecture(format!(
                "weighted layer {k} must read the output of a SignActivation"
            )));
        }
        shape = match layer {
            Layer::Dense { params } => {
                check_weighted(params)?;
                if params.fan_in() != shape.len() {
                    return Err(BnnError::Architecture(format!(
                        "layer {k}: dense expects {} inputs, got {}",
                        params.fan_in(),
                        shape.len()
                    )));
                }
                Shape3::flat(params.out_dim())
            }
            Layer::Conv { geometry, params } => {
                check_weighted(params)?;
                let g = conv_geometry(shape, geometry.in_c, geometry.out_c, geometry.kernel_h, geometry.kernel_w, geometry.stride)?;
                if g != *geometry || params.fan_in() != g.fan_in() || params.out_dim() != g.out_c {
                    return Err(BnnError::Architecture(format!("layer {k}: conv geometry inconsistent with input {shape}")));
                }
                Shape3::new(g.out_h, g.out_w, g.out_c)
            }
            Layer::Sign => shape,
            Layer::ScaleShift { scale, bias } => {
                if scale.len() != shape.c || bias.len() != shape.c {
                    return Err(BnnError::Architecture(format!(
                        "layer {k}: ScaleShift has {} channels, input has {}",
                        scale.len(),
                        shape.c
                    )));
                }
                if scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) || bias.iter().any(|b| !b.is_finite()) {
                    return Err(BnnError::Architecture(format!("layer {k}: ScaleShift scale must be finite and > 0")));
                }
                shape
            }
        };
        shapes.push(shape);
    }
    Ok(shapes)
}

fn check_weighted(p: &WeightedParams) -> Result<(), BnnError> {
    if p.bits.shape().len() != 2 || p.out_dim() == 0 || p.fan_in() == 0 {
        return Err(BnnError::Architecture("weights must be a non-empty [out, fan_in] tensor".into()));
    }
    if p.scales.len() != p.out_dim() {
        return Err(BnnError::Architecture("one scale per output channel required".into()));
    }
    if p.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(BnnError::Architecture("weight scales must be finite and > 0".into()));
    }
    if let Some(l) = &p.latent {
        if l.len() != p.bits.len() {
            return Err(BnnError::Architecture("latent count differs from weight count".into()));
        }
    }
    Ok(())
}
