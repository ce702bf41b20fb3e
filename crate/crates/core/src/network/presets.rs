//! Named architectures.

use super::{LayerSpec, Shape3};
use crate::error::BnnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    /// Two 3×3 convolutions and a 64-unit hidden layer, for 10×10 desk-scale grids.
    BqnSmall,
    /// The classic 84×84×4 Atari Q-network layout, binarized.
    Bqn,
    /// `Bqn` plus two 64-filter 3×3 convolutions after the third convolution.
    BqnL,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::BqnSmall, Preset::Bqn, Preset::BqnL];

    pub fn name(self) -> &'static str {
        match self {
            Preset::BqnSmall => "bqn-small",
            Preset::Bqn => "bqn",
            Preset::BqnL => "bqn-l",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == name)
    }

    /// Default input shape for the preset.
    pub fn default_input(self) -> Shape3 {
        match self {
            Preset::BqnSmall => Shape3::new(10, 10, 4),
            Preset::Bqn | Preset::BqnL => Shape3::new(84, 84, 4),
        }
    }

    pub fn layers(self, input: Shape3, actions: usize) -> Result<Vec<LayerSpec>, BnnError> {
        let convs: &[(usize, usize, usize)] = match self {
            Preset::BqnSmall => &[(8, 3, 1), (16, 3, 1)],
            Preset::Bqn => &[(32, 8, 4), (64, 4, 2), (64, 3, 1)],
            Preset::BqnL => &[(32, 8, 4), (64, 4, 2), (64, 3, 1), (64, 3, 1), (64, 3, 1)],
        };
        let hidden = match self {
            Preset::BqnSmall => 64,
            Preset::Bqn | Preset::BqnL => 512,
        };
        if actions == 0 {
            return Err(BnnError::Architecture("at least one action required".into()));
        }
        let mut specs = Vec::new();
        let (mut h, mut w, mut c) = (input.h, input.w, input.c);
        for &(filters, k, stride) in convs {
            if h < k || w < k {
                return Err(BnnError::Architecture(format!(
                    "{} needs a larger input than {input}",
                    self.name()
                )));
            }
            specs.push(LayerSpec::BinaryConv2d {
                in_channels: c,
                out_channels: filters,
                kernel_h: k,
                kernel_w: k,
                stride,
            });
            specs.push(LayerSpec::ScaleShift { channels: filters });
            specs.push(LayerSpec::SignActivation);
            h = (h - k) / stride + 1;
            w = (w - k) / stride + 1;
            c = filters;
        }
        specs.push(LayerSpec::BinaryDense { in_dim: h * w * c, out_dim: hidden });
        specs.push(LayerSpec::ScaleShift { channels: hidden });
        specs.push(LayerSpec::SignActivation);
        specs.push(LayerSpec::BinaryDense { in_dim: hidden, out_dim: actions });
        specs.push(LayerSpec::ScaleShift { channels: actions });
        Ok(specs)
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
