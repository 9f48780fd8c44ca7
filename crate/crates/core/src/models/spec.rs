use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Plain stack of 3×3 convolutions with ReLU.
    Vdcnn,
    /// Residual blocks with batch normalization and a long skip.
    Resnet,
}

/// Declarative description of a baseline network.
///
/// For VDCNN, `depth` is the number of convolutional layers. For ResNet it is
/// the number of residual blocks; the network is laid out as
///
/// ```text
/// head conv + ReLU
/// depth × [conv, BN, ReLU, conv, BN, + skip]
/// conv + BN (+ long skip from the head)
/// tail_convs × [conv + ReLU]
/// output conv
/// ```
///
/// giving `2·depth + tail_convs + 3` convolutions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub depth: usize,
    pub width: usize,
    #[serde(default)]
    pub tail_convs: usize,
    #[serde(default)]
    pub long_skip: bool,
    /// Adds the input image to the network output.
    #[serde(default)]
    pub global_residual: bool,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ModelSpec {
    /// 20 layers of width 64.
    pub fn vdcnn() -> Self {
        Self {
            architecture: Architecture::Vdcnn,
            depth: 20,
            width: 64,
            tail_convs: 0,
            long_skip: false,
            global_residual: false,
            in_channels: 3,
            out_channels: 3,
        }
    }

    /// 16 residual blocks of width 64 and two tail convolutions: 37 layers.
    pub fn resnet() -> Self {
        Self {
            architecture: Architecture::Resnet,
            depth: 16,
            width: 64,
            tail_convs: 2,
            long_skip: true,
            global_residual: false,
            in_channels: 3,
            out_channels: 3,
        }
    }

    pub fn vdcnn_mini() -> Self {
        Self {
            depth: 6,
            width: 16,
            ..Self::vdcnn()
        }
    }

    /// Four blocks of width 16 without tail convolutions: 11 layers.
    pub fn resnet_mini() -> Self {
        Self {
            depth: 4,
            width: 16,
            tail_convs: 0,
            ..Self::resnet()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "vdcnn" => Self::vdcnn(),
            "resnet" => Self::resnet(),
            "vdcnn-mini" => Self::vdcnn_mini(),
            "resnet-mini" => Self::resnet_mini(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidSpec(msg));
        match self.architecture {
            Architecture::Vdcnn if self.depth < 2 => {
                return fail(format!("VDCNN needs at least 2 layers, got {}", self.depth))
            }
            Architecture::Resnet if self.depth < 1 => {
                return fail("ResNet needs at least 1 residual block".into())
            }
            _ => {}
        }
        if self.width == 0 {
            return fail("feature width must be positive".into());
        }
        if self.in_channels != 3 || self.out_channels != 3 {
            return fail(format!(
                "models map RGB to RGB, got {}→{} channels",
                self.in_channels, self.out_channels
            ));
        }
        Ok(())
    }

    pub fn conv_layer_count(&self) -> usize {
        match self.architecture {
            Architecture::Vdcnn => self.depth,
            Architecture::Resnet => 2 * self.depth + self.tail_convs + 3,
        }
    }

    /// Side of the input window seen by one output pixel. Every layer is a
    /// 3×3 stride-1 convolution on the main path, so it grows by 2 per layer.
    pub fn receptive_field(&self) -> usize {
        1 + 2 * self.conv_layer_count()
    }
}
