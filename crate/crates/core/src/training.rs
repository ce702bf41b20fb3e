//! Gradient machinery for binarized networks.
//!
//! Forward passes run in real arithmetic over the effective weights and
//! record a [`GradientTape`]. In [`ForwardMode::Binary`] the effective weights
//! and activations are true signs; the backward pass then substitutes the
//! clipped-identity surrogate (straight-through estimator). In
//! [`ForwardMode::Surrogate`] the forward pass itself uses `clip(·, -1, 1)`
//! for every sign, so the backward pass is the exact gradient of that network.

use crate::bits::sign_f64;
use crate::error::{BnnError, TrainError};
use crate::network::kernels::{self, ConvGeometry};
use crate::network::{BinarizedNetwork, Layer, OptimizerSection, SCALE_FLOOR};

/// Straight-through gradient of `sign` at `preact`: pass-through on `|preact| <= 1`.
#[inline]
pub fn ste_grad_sign(upstream: f64, preact: f64) -> f64 {
    if preact.abs() <= 1.0 {
        upstream
    } else {
        0.0
    }
}

/// Mean squared error over the taken actions and its gradient w.r.t. `q_pred`.
pub fn loss(q_pred: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>), TrainError> {
    if q_pred.len() != targets.len() {
        return Err(TrainError::LengthMismatch(q_pred.len(), targets.len()));
    }
    if q_pred.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let n = q_pred.len() as f64;
    let mut total = 0.0;
    let grad = q_pred
        .iter()
        .zip(targets)
        .map(|(&q, &y)| {
            let d = y - q;
            total += d * d;
            -2.0 * d / n
        })
        .collect();
    Ok((total / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Binary,
    Surrogate,
}

#[inline]
fn clip_unit(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Per-layer cached values of one forward pass.
#[derive(Debug)]
pub struct GradientTape {
    stamp: u64,
    mode: ForwardMode,
    /// Input of every layer.
    inputs: Vec<Vec<f64>>,
    /// For weighted layers, the sums before the per-channel scale.
    sums: Vec<Vec<f64>>,
}

/// Effective real weights of a network, computed once and shared by every
/// sample of a minibatch.
pub struct TrainingView<'a> {
    net: &'a BinarizedNetwork,
    mode: ForwardMode,
    weights: Vec<Vec<f64>>,
    /// Weight-sign STE mask, `|latent| <= 1`.
    masks: Vec<Vec<f64>>,
}

impl<'a> TrainingView<'a> {
    pub fn new(net: &'a BinarizedNetwork, mode: ForwardMode) -> Result<Self, BnnError> {
        let mut weights = Vec::with_capacity(net.layers().len());
        let mut masks = Vec::with_capacity(net.layers().len());
        for layer in net.layers() {
            match layer.weighted() {
                Some(p) => {
                    let latent = p.latent.as_ref().ok_or(BnnError::MissingLatents)?;
                    weights.push(match mode {
                        ForwardMode::Binary => latent.iter().map(|&l| sign_f64(l as f64)).collect(),
                        ForwardMode::Surrogate => latent.iter().map(|&l| clip_unit(l as f64)).collect(),
                    });
                    masks.push(latent.iter().map(|&l| if l.abs() <= 1.0 { 1.0 } else { 0.0 }).collect());
                }
                None => {
                    weights.push(Vec::new());
                    masks.push(Vec::new());
                }
            }
        }
        Ok(TrainingView { net, mode, weights, masks })
    }

    pub fn network(&self) -> &BinarizedNetwork {
        self.net
    }

    pub fn forward(&self, input: &[f32]) -> Result<(Vec<f64>, GradientTape), BnnError> {
        let net = self.net;
        if input.len() != net.input_shape().len() {
            return Err(BnnError::Shape(format!(
                "input has {} values, network expects {}",
                input.len(),
                net.input_shape().len()
            )));
        }
        let shapes = net.shapes();
        let mut inputs = Vec::with_capacity(net.layers().len());
        let mut sums = Vec::with_capacity(net.layers().len());
        let mut x: Vec<f64> = input.iter().map(|&v| v as f64).collect();
        for (k, layer) in net.layers().iter().enumerate() {
            let out_len = shapes[k + 1].len();
            let y = match layer {
                Layer::Dense { params } => {
                    let mut pre = vec![0.0; out_len];
                    kernels::dense_pre(&self.weights[k], &x, out_len, &mut pre);
                    let y = scaled(&pre, &params.scales);
                    sums.push(pre);
                    y
                }
                Layer::Conv { geometry, params } => {
                    let mut pre = vec![0.0; out_len];
                    kernels::conv_pre(geometry, &self.weights[k], &x, &mut pre);
                    let y = scaled(&pre, &params.scales);
                    sums.push(pre);
                    y
                }
                Layer::Sign => {
                    sums.push(Vec::new());
                    match self.mode {
                        ForwardMode::Binary => x.iter().map(|&v| sign_f64(v)).collect(),
                        ForwardMode::Surrogate => x.iter().map(|&v| clip_unit(v)).collect(),
                    }
                }
                Layer::ScaleShift { scale, bias } => {
                    sums.push(Vec::new());
                    let c = scale.len();
                    x.iter().enumerate().map(|(i, &v)| scale[i % c] as f64 * (v + bias[i % c] as f64)).collect()
                }
            };
            inputs.push(std::mem::replace(&mut x, y));
        }
        Ok((x, GradientTape { stamp: net.stamp(), mode: self.mode, inputs, sums }))
    }

    /// Accumulates parameter gradients of one sample into `grads`.
    /// `output_grad` is the loss gradient w.r.t. the network outputs.
    pub fn backward(&self, tape: GradientTape, output_grad: &[f64], grads: &mut Gradients) -> Result<(), TrainError> {
        let net = self.net;
        if tape.stamp != net.stamp() || tape.mode != self.mode || tape.inputs.len() != net.layers().len() {
            return Err(TrainError::StaleTape);
        }
        if output_grad.len() != net.output_dim() {
            return Err(TrainError::LengthMismatch(output_grad.len(), net.output_dim()));
        }
        if grads.layers.len() != net.layers().len() {
            return Err(TrainError::StateMismatch);
        }
        let mut gy = output_grad.to_vec();
        for k in (0..net.layers().len()).rev() {
            let x = &tape.inputs[k];
            let need_input_grad = k > 0;
            let gx = match (&net.layers()[k], &mut grads.layers[k]) {
                (Layer::Dense { params }, LayerGrad::Weighted { latent, scales }) => dense_backward(
                    &self.weights[k],
                    &self.masks[k],
                    &params.scales,
                    x,
                    &tape.sums[k],
                    &gy,
                    latent,
                    scales,
                    need_input_grad,
                ),
                (Layer::Conv { geometry, params }, LayerGrad::Weighted { latent, scales }) => conv_backward(
                    geometry,
                    &self.weights[k],
                    &self.masks[k],
                    &params.scales,
                    x,
                    &tape.sums[k],
                    &gy,
                    latent,
                    scales,
                    need_input_grad,
                ),
                (Layer::Sign, LayerGrad::None) => gy.iter().zip(x).map(|(&g, &v)| ste_grad_sign(g, v)).collect(),
                (Layer::ScaleShift { scale, bias }, LayerGrad::Shift { scale: gs, bias: gb }) => {
                    let c = scale.len();
                    let mut gx = vec![0.0; x.len()];
                    for i in 0..x.len() {
                        let ch = i % c;
                        let s = scale[ch] as f64;
                        gs[ch] += gy[i] * (x[i] + bias[ch] as f64);
                        gb[ch] += gy[i] * s;
                        gx[i] = gy[i] * s;
                    }
                    gx
                }
                _ => return Err(TrainError::StateMismatch),
            };
            gy = gx;
        }
        Ok(())
    }
}

fn scaled(pre: &[f64], scales: &[f32]) -> Vec<f64> {
    let c = scales.len();
    pre.iter().enumerate().map(|(i, &v)| v * scales[i % c] as f64).collect()
}

#[allow(clippy::too_many_arguments)]
fn dense_backward(
    w: &[f64],
    mask: &[f64],
    alpha: &[f32],
    x: &[f64],
    sums: &[f64],
    gy: &[f64],
    g_latent: &mut [f64],
    g_alpha: &mut [f64],
    need_input_grad: bool,
) -> Vec<f64> {
    let n = x.len();
    let mut gx = vec![0.0; if need_input_grad { n } else { 0 }];
    for o in 0..gy.len() {
        let g = gy[o];
        if g == 0.0 {
            continue;
        }
        g_alpha[o] += g * sums[o];
        let gw = g * alpha[o] as f64;
        let row = o * n..(o + 1) * n;
        for ((gl, &xi), &m) in g_latent[row.clone()].iter_mut().zip(x).zip(&mask[row.clone()]) {
            *gl += gw * xi * m;
        }
        if need_input_grad {
            for (gxi, &wi) in gx.iter_mut().zip(&w[row]) {
                *gxi += gw * wi;
            }
        }
    }
    gx
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    g: &ConvGeometry,
    w: &[f64],
    mask: &[f64],
    alpha: &[f32],
    x: &[f64],
    sums: &[f64],
    gy: &[f64],
    g_latent: &mut [f64],
    g_alpha: &mut [f64],
    need_input_grad: bool,
) -> Vec<f64> {
    let fan_in = g.fan_in();
    let mut gx = vec![0.0; if need_input_grad { x.len() } else { 0 }];
    let mut g_weight = vec![0.0; w.len()];
    let mut patch = vec![0.0; fan_in];
    let mut g_patch = vec![0.0; fan_in];
    for p in 0..g.positions() {
        g.gather(x, p, &mut patch);
        g_patch.iter_mut().for_each(|v| *v = 0.0);
        let mut any = false;
        for o in 0..g.out_c {
            let gv = gy[p * g.out_c + o];
            if gv == 0.0 {
                continue;
            }
            any = true;
            g_alpha[o] += gv * sums[p * g.out_c + o];
            let gw = gv * alpha[o] as f64;
            let row = o * fan_in..(o + 1) * fan_in;
            for (acc, &xi) in g_weight[row.clone()].iter_mut().zip(&patch) {
                *acc += gw * xi;
            }
            if need_input_grad {
                for (acc, &wi) in g_patch.iter_mut().zip(&w[row]) {
                    *acc += gw * wi;
                }
            }
        }
        if need_input_grad && any {
            g.for_patch(p, |k, idx| gx[idx] += g_patch[k]);
        }
    }
    for ((gl, gw), m) in g_latent.iter_mut().zip(&g_weight).zip(mask) {
        *gl += gw * m;
    }
    gx
}

/// Gradient buffers aligned with a network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad {
    Weighted { latent: Vec<f64>, scales: Vec<f64> },
    Shift { scale: Vec<f64>, bias: Vec<f64> },
    None,
}

impl Gradients {
    pub fn zeros_like(net: &BinarizedNetwork) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|layer| match layer {
                Layer::Dense { params } | Layer::Conv { params, .. } => {
                    LayerGrad::Weighted { latent: vec![0.0; params.bits.len()], scales: vec![0.0; params.scales.len()] }
                }
                Layer::ScaleShift { scale, .. } => LayerGrad::Shift { scale: vec![0.0; scale.len()], bias: vec![0.0; scale.len()] },
                Layer::Sign => LayerGrad::None,
            })
            .collect();
        Gradients { layers }
    }

    /// Flat views in parameter-group order: latent, scales per weighted layer;
    /// scale, bias per ScaleShift.
    pub fn groups(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                LayerGrad::Weighted { latent, scales } => {
                    out.push(latent.as_slice());
                    out.push(scales.as_slice());
                }
                LayerGrad::Shift { scale, bias } => {
                    out.push(scale.as_slice());
                    out.push(bias.as_slice());
                }
                LayerGrad::None => {}
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.groups().iter().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.groups().iter().flat_map(|g| g.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig { learning_rate: 2.5e-4, decay: 0.95, epsilon: 1e-2 }
    }
}

/// Parameter kinds decide the projection applied after each update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamKind {
    Latent,
    Scale,
    Bias,
}

/// RMSProp over latent weights, scales and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    averages: Vec<Vec<f32>>,
}

impl RmsProp {
    pub fn new(net: &BinarizedNetwork, config: RmsPropConfig) -> Self {
        let averages = Gradients::zeros_like(net).groups().iter().map(|g| vec![0.0; g.len()]).collect();
        RmsProp { config, averages }
    }

    pub fn averages(&self) -> &[Vec<f32>] {
        &self.averages
    }

    pub fn to_section(&self) -> OptimizerSection {
        OptimizerSection {
            learning_rate: self.config.learning_rate as f32,
            decay: self.config.decay as f32,
            epsilon: self.config.epsilon as f32,
            averages: self.averages.clone(),
        }
    }

    pub fn from_section(net: &BinarizedNetwork, section: &OptimizerSection) -> Result<Self, TrainError> {
        let mut opt = RmsProp::new(
            net,
            RmsPropConfig {
                learning_rate: section.learning_rate as f64,
                decay: section.decay as f64,
                epsilon: section.epsilon as f64,
            },
        );
        if opt.averages.len() != section.averages.len()
            || opt.averages.iter().zip(&section.averages).any(|(a, b)| a.len() != b.len())
        {
            return Err(TrainError::StateMismatch);
        }
        opt.averages = section.averages.clone();
        Ok(opt)
    }

    /// `v ← ρv + (1−ρ)g²; p ← p − lr·g/(√v + ε)`, then latents are clipped to
    /// `[-1, 1]`, scales floored at `1e-6`, and the packed signs re-derived.
    pub fn step(&mut self, net: &mut BinarizedNetwork, grads: &Gradients) -> Result<(), TrainError> {
        if !grads.all_finite() {
            return Err(TrainError::NonFiniteGradient);
        }
        let groups = grads.groups();
        if groups.len() != self.averages.len() || groups.iter().zip(&self.averages).any(|(g, v)| g.len() != v.len()) {
            return Err(TrainError::StateMismatch);
        }
        let RmsPropConfig { learning_rate: lr, decay: rho, epsilon: eps } = self.config;
        let mut idx = 0;
        for layer in net.layers_mut() {
            let mut params: Vec<(&mut [f32], ParamKind)> = match layer {
                Layer::Dense { params } | Layer::Conv { params, .. } => {
                    let latent = params.latent.as_mut().ok_or(BnnError::MissingLatents)?;
                    vec![(latent.as_mut_slice(), ParamKind::Latent), (params.scales.as_mut_slice(), ParamKind::Scale)]
                }
                Layer::ScaleShift { scale, bias } => {
                    vec![(scale.as_mut_slice(), ParamKind::Scale), (bias.as_mut_slice(), ParamKind::Bias)]
                }
                Layer::Sign => Vec::new(),
            };
            for (values, kind) in params.iter_mut() {
                let g = groups[idx];
                let v = &mut self.averages[idx];
                for i in 0..values.len() {
                    let vi = (rho * v[i] as f64 + (1.0 - rho) * g[i] * g[i]) as f32;
                    v[i] = vi;
                    let updated = values[i] as f64 - lr * g[i] / ((vi as f64).sqrt() + eps);
                    values[i] = match kind {
                        ParamKind::Latent => updated.clamp(-1.0, 1.0) as f32,
                        ParamKind::Scale => (updated as f32).max(SCALE_FLOOR),
                        ParamKind::Bias => updated as f32,
                    };
                }
                idx += 1;
            }
            if let Some(p) = layer.weighted_mut() {
                p.refresh_bits()?;
            }
        }
        Ok(())
    }
}
