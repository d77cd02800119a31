//! Encoders producing the stride-{4, 8, 16, 32} feature stages.
//!
//! `tiny` and `resnet18` share one trainable residual encoder built from
//! basic blocks. `mobilenetv2` and `resnet50` exist only as structural
//! descriptions for parameter audits; asking them for a forward pass is an
//! error.

mod audit;
mod structural;

pub use audit::{
    sap_removal_delta, structural_audit, trace_head_shapes, AuditReport, AuditRow, AuditTarget,
    HeadShapes,
};
pub use structural::{backbone_ledger, Ledger};

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, CtdError, Result};
use crate::nn::{join, Activation, ConvBnRelu, Mode, Module, ParamInit, TensorRole};
use crate::tensor::{add, pool2d, relu, Float, PoolKind, Tensor};

/// Overall stride of each stage relative to the input image.
pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneKind {
    Tiny,
    Resnet18,
    MobileNetV2Structural,
    Resnet50Structural,
}

impl BackboneKind {
    pub fn is_trainable(self) -> bool {
        matches!(self, BackboneKind::Tiny | BackboneKind::Resnet18)
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::Tiny => "tiny",
            BackboneKind::Resnet18 => "resnet18",
            BackboneKind::MobileNetV2Structural => "mobilenetv2-structural",
            BackboneKind::Resnet50Structural => "resnet50-structural",
        })
    }
}

impl FromStr for BackboneKind {
    type Err = CtdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(BackboneKind::Tiny),
            "resnet18" => Ok(BackboneKind::Resnet18),
            "mobilenetv2-structural" | "mobilenetv2" => Ok(BackboneKind::MobileNetV2Structural),
            "resnet50-structural" | "resnet50" => Ok(BackboneKind::Resnet50Structural),
            other => Err(CtdError::Config(format!("unknown backbone kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Output channels of stages E^2..E^5 before the width multiplier.
    pub stage_channels: [usize; 4],
    /// Blocks per stage.
    pub depths: [usize; 4],
    pub width_multiplier: f64,
}

impl BackboneConfig {
    pub fn tiny() -> Self {
        BackboneConfig {
            kind: BackboneKind::Tiny,
            stage_channels: [16, 32, 64, 128],
            depths: [1, 1, 1, 1],
            width_multiplier: 1.0,
        }
    }

    pub fn resnet18() -> Self {
        BackboneConfig {
            kind: BackboneKind::Resnet18,
            stage_channels: [64, 128, 256, 512],
            depths: [2, 2, 2, 2],
            width_multiplier: 1.0,
        }
    }

    /// MobileNetV2 truncated after the 160-channel stride-32 blocks.
    pub fn mobilenetv2() -> Self {
        BackboneConfig {
            kind: BackboneKind::MobileNetV2Structural,
            stage_channels: [24, 32, 96, 160],
            depths: [2, 3, 7, 3],
            width_multiplier: 1.0,
        }
    }

    pub fn resnet50() -> Self {
        BackboneConfig {
            kind: BackboneKind::Resnet50Structural,
            stage_channels: [256, 512, 1024, 2048],
            depths: [3, 4, 6, 3],
            width_multiplier: 1.0,
        }
    }

    pub fn for_kind(kind: BackboneKind) -> Self {
        match kind {
            BackboneKind::Tiny => Self::tiny(),
            BackboneKind::Resnet18 => Self::resnet18(),
            BackboneKind::MobileNetV2Structural => Self::mobilenetv2(),
            BackboneKind::Resnet50Structural => Self::resnet50(),
        }
    }

    pub fn with_width(mut self, multiplier: f64) -> Self {
        self.width_multiplier = multiplier;
        self
    }

    /// Stage channels after applying the width multiplier.
    pub fn channels(&self) -> [usize; 4] {
        self.stage_channels
            .map(|c| ((c as f64 * self.width_multiplier).round() as usize).max(1))
    }

    /// Width of the stem convolution (residual encoders only).
    pub fn stem_channels(&self) -> usize {
        match self.kind {
            BackboneKind::Resnet50Structural => 64,
            _ => self.channels()[0],
        }
    }

    pub fn stem_kernel(&self) -> usize {
        match self.kind {
            BackboneKind::Tiny => 3,
            _ => 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.contains(&0) || self.stage_channels.contains(&0) {
            return Err(CtdError::Config(
                "backbone stages need positive depth and width".into(),
            ));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(CtdError::Config(format!(
                "width multiplier must be positive, got {}",
                self.width_multiplier
            )));
        }
        Ok(())
    }
}

/// E^2..E^5.
#[derive(Clone, Debug)]
pub struct StageFeatures<T: Float> {
    pub e2: Tensor<T>,
    pub e3: Tensor<T>,
    pub e4: Tensor<T>,
    pub e5: Tensor<T>,
}

impl<T: Float> StageFeatures<T> {
    pub fn stages(&self) -> [&Tensor<T>; 4] {
        [&self.e2, &self.e3, &self.e4, &self.e5]
    }
}

/// Checks an encoder input: 3 channels, extents divisible by 32.
pub fn check_image_shape(shape: crate::tensor::Shape) -> Result<()> {
    if shape.c != 3 {
        return Err(shape_err!("encoder expects 3-channel images, got {shape}"));
    }
    if !shape.h.is_multiple_of(32) || !shape.w.is_multiple_of(32) {
        return Err(shape_err!(
            "image extents must be divisible by 32, got {}x{}",
            shape.h,
            shape.w
        ));
    }
    Ok(())
}

#[derive(Debug)]
pub struct BasicBlock<T: Float> {
    pub conv1: ConvBnRelu<T>,
    pub conv2: ConvBnRelu<T>,
    pub downsample: Option<ConvBnRelu<T>>,
}

impl<T: Float> BasicBlock<T> {
    pub fn new(init: &mut ParamInit, cin: usize, cout: usize, stride: usize) -> Self {
        let downsample = (stride != 1 || cin != cout)
            .then(|| ConvBnRelu::new(init, cin, cout, 1, stride, 0, Activation::None));
        BasicBlock {
            conv1: ConvBnRelu::new(init, cin, cout, 3, stride, 1, Activation::Relu),
            conv2: ConvBnRelu::new(init, cout, cout, 3, 1, 1, Activation::None),
            downsample,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.conv2.forward(&self.conv1.forward(x, mode)?, mode)?;
        let shortcut = match &self.downsample {
            Some(d) => d.forward(x, mode)?,
            None => x.clone(),
        };
        Ok(relu(&add(&y, &shortcut)?))
    }
}

impl<T: Float> Module<T> for BasicBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.downsample.visit(&join(prefix, "downsample"), f);
    }
}

/// Stem (stride 2) → 3×3 max-pool (stride 2) → four stages of basic blocks,
/// the first at stride 1 and the rest downsampling by 2.
#[derive(Debug)]
pub struct Encoder<T: Float> {
    pub config: BackboneConfig,
    pub stem: ConvBnRelu<T>,
    pub stages: Vec<Vec<BasicBlock<T>>>,
}

impl<T: Float> Encoder<T> {
    pub fn new(config: &BackboneConfig, init: &mut ParamInit) -> Result<Self> {
        config.validate()?;
        if !config.kind.is_trainable() {
            return Err(CtdError::UnsupportedForward(config.kind.to_string()));
        }
        let k = config.stem_kernel();
        let stem_c = config.stem_channels();
        let stem = ConvBnRelu::new(init, 3, stem_c, k, 2, k / 2, Activation::Relu);
        let mut stages = Vec::with_capacity(4);
        let mut cin = stem_c;
        for (i, (&cout, &depth)) in config.channels().iter().zip(&config.depths).enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let blocks = (0..depth)
                .map(|d| {
                    let (block_in, block_stride) = if d == 0 { (cin, stride) } else { (cout, 1) };
                    BasicBlock::new(init, block_in, cout, block_stride)
                })
                .collect();
            stages.push(blocks);
            cin = cout;
        }
        Ok(Encoder {
            config: config.clone(),
            stem,
            stages,
        })
    }

    pub fn forward(&self, image: &Tensor<T>, mode: Mode) -> Result<StageFeatures<T>> {
        check_image_shape(image.shape())?;
        let x = self.stem.forward(image, mode)?;
        let mut x = pool2d(&x, PoolKind::Max, 3, 2, 1)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(&x, mode)?;
            }
            outs.push(x.clone());
        }
        let mut it = outs.into_iter();
        let mut next = || it.next().expect("four stages");
        Ok(StageFeatures {
            e2: next(),
            e3: next(),
            e4: next(),
            e5: next(),
        })
    }
}

impl<T: Float> Module<T> for Encoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, stage) in self.stages.iter().enumerate() {
            stage.visit(&join(prefix, &format!("stage{}", i + 1)), f);
        }
    }
}

/// Forward pass for any configured backbone; structural kinds fail.
pub fn encoder_forward<T: Float>(
    encoder: &Encoder<T>,
    image: &Tensor<T>,
    mode: Mode,
) -> Result<StageFeatures<T>> {
    encoder.forward(image, mode)
}
