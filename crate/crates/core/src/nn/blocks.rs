//! FFM, SAP, SAM, CAM and BRM.

use super::layers::{ConvBnRelu, ParamInit};
use super::{join, Conv2d, Mode, Module, TensorRole};
use crate::error::{shape_err, Result};
use crate::tensor::{
    add, bilinear_upsample, channel_pool, concat_channels, global_avg_pool, mul, mul_broadcast,
    pool2d, sigmoid, Float, PoolKind, Tensor,
};

/// Feature fusion: elementwise product followed by two 3×3 ConvBNReLU units.
#[derive(Debug)]
pub struct Ffm<T: Float> {
    pub conv1: ConvBnRelu<T>,
    pub conv2: ConvBnRelu<T>,
}

impl<T: Float> Ffm<T> {
    pub fn new(init: &mut ParamInit, channels: usize) -> Self {
        Ffm {
            conv1: ConvBnRelu::same(init, channels, channels, 3),
            conv2: ConvBnRelu::same(init, channels, channels, 3),
        }
    }

    pub fn forward(&self, f1: &Tensor<T>, f2: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if f1.shape() != f2.shape() {
            return Err(shape_err!(
                "FFM inputs differ: {} vs {}",
                f1.shape(),
                f2.shape()
            ));
        }
        let fused = mul(f1, f2)?;
        self.conv2.forward(&self.conv1.forward(&fused, mode)?, mode)
    }
}

impl<T: Float> Module<T> for Ffm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }
}

/// Scale-adaptive pooling: `branches` stride-1 poolings with kernel `2n+1`
/// and padding `n`, concatenated along channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SapConfig {
    pub branches: usize,
    pub kind: PoolKind,
}

impl Default for SapConfig {
    fn default() -> Self {
        SapConfig {
            branches: 4,
            kind: PoolKind::Avg,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Sap {
    pub config: SapConfig,
}

impl Sap {
    pub fn new(config: SapConfig) -> Self {
        Sap { config }
    }

    pub fn out_channels(&self, in_channels: usize) -> usize {
        self.config.branches * in_channels
    }

    pub fn forward<T: Float>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.config.branches == 0 {
            return Err(shape_err!("SAP needs at least one branch"));
        }
        let branches = (0..self.config.branches)
            .map(|n| pool2d(x, self.config.kind, 2 * n + 1, 1, n))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor<T>> = branches.iter().collect();
        concat_channels(&refs)
    }
}

impl<T: Float> Module<T> for Sap {
    fn visit(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole)) {}
}

/// Spatial attention: a 5×5 convolution over the concatenated channel-mean
/// and channel-max maps gives `M_sa`; the gated input passes a 3×3 unit.
#[derive(Debug)]
pub struct Sam<T: Float> {
    pub attention: Conv2d<T>,
    pub out: ConvBnRelu<T>,
}

impl<T: Float> Sam<T> {
    pub fn new(init: &mut ParamInit, cin: usize, cout: usize) -> Self {
        Sam {
            attention: Conv2d::same(init, 2, 1, 5, true),
            out: ConvBnRelu::same(init, cin, cout, 3),
        }
    }

    /// `(S_avg, S_max)`, each `(B, 1, H, W)`.
    pub fn channel_maps(&self, x: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        (
            channel_pool(x, PoolKind::Avg),
            channel_pool(x, PoolKind::Max),
        )
    }

    pub fn attention_map(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (avg, max) = self.channel_maps(x);
        let stacked = concat_channels(&[&avg, &max])?;
        Ok(sigmoid(&self.attention.forward(&stacked)?))
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let m = self.attention_map(x)?;
        self.out.forward(&mul_broadcast(x, &m)?, mode)
    }
}

impl<T: Float> Module<T> for Sam<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole)) {
        self.attention.visit(&join(prefix, "attention"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
}

pub struct CamParts<T: Float> {
    pub out: Tensor<T>,
    pub c1: Tensor<T>,
    pub c2: Tensor<T>,
}

/// Cross aggregation of a coarse map `d_p1` with a map `d_p2` at twice its
/// resolution.
#[derive(Debug)]
pub struct Cam<T: Float> {
    pub down: ConvBnRelu<T>,
    pub cross_coarse: ConvBnRelu<T>,
    pub cross_fine: ConvBnRelu<T>,
    pub ffm: Ffm<T>,
}

impl<T: Float> Cam<T> {
    pub fn new(init: &mut ParamInit, channels: usize) -> Self {
        Cam {
            down: ConvBnRelu::new(init, channels, channels, 3, 2, 1, super::Activation::Relu),
            cross_coarse: ConvBnRelu::same(init, channels, channels, 3),
            cross_fine: ConvBnRelu::same(init, channels, channels, 3),
            ffm: Ffm::new(init, channels),
        }
    }

    pub fn forward_parts(
        &self,
        d_p1: &Tensor<T>,
        d_p2: &Tensor<T>,
        mode: Mode,
    ) -> Result<CamParts<T>> {
        let (coarse, fine) = (d_p1.shape(), d_p2.shape());
        if coarse.h * 2 != fine.h
            || coarse.w * 2 != fine.w
            || coarse.c != fine.c
            || coarse.b != fine.b
        {
            return Err(shape_err!(
                "CAM needs d_p1 at exactly half the resolution of d_p2: {coarse} vs {fine}"
            ));
        }
        let up_p1 = bilinear_upsample(d_p1, fine.h, fine.w)?;
        let down_p2 = self.down.forward(d_p2, mode)?;
        let c1 = self.cross_coarse.forward(&mul(d_p1, &down_p2)?, mode)?;
        let c2 = self.cross_fine.forward(&mul(d_p2, &up_p1)?, mode)?;
        let up_c1 = bilinear_upsample(&c1, fine.h, fine.w)?;
        let out = self.ffm.forward(&up_c1, &c2, mode)?;
        Ok(CamParts { out, c1, c2 })
    }

    pub fn forward(&self, d_p1: &Tensor<T>, d_p2: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.forward_parts(d_p1, d_p2, mode)?.out)
    }
}

impl<T: Float> Module<T> for Cam<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole)) {
        self.down.visit(&join(prefix, "down"), f);
        self.cross_coarse.visit(&join(prefix, "cross_coarse"), f);
        self.cross_fine.visit(&join(prefix, "cross_fine"), f);
        self.ffm.visit(&join(prefix, "ffm"), f);
    }
}

pub struct BrmParts<T: Float> {
    pub out: Tensor<T>,
    /// `B_f = Up(d_p12) + d_p3`.
    pub fused: Tensor<T>,
    /// Channel attention, `(B, C, 1, 1)`.
    pub attention: Tensor<T>,
    /// `B_r = B_f ⊗ attention`.
    pub refined: Tensor<T>,
}

/// Boundary refinement: additive fusion, channel attention from the pooled
/// fused map, residual combination and two 3×3 units.
#[derive(Debug)]
pub struct Brm<T: Float> {
    pub attention: Conv2d<T>,
    pub conv1: ConvBnRelu<T>,
    pub conv2: ConvBnRelu<T>,
}

impl<T: Float> Brm<T> {
    pub fn new(init: &mut ParamInit, channels: usize) -> Self {
        Brm {
            attention: Conv2d::same(init, channels, channels, 1, true),
            conv1: ConvBnRelu::same(init, channels, channels, 3),
            conv2: ConvBnRelu::same(init, channels, channels, 3),
        }
    }

    pub fn forward_parts(
        &self,
        d_p12: &Tensor<T>,
        d_p3: &Tensor<T>,
        mode: Mode,
    ) -> Result<BrmParts<T>> {
        let (coarse, fine) = (d_p12.shape(), d_p3.shape());
        if coarse.h * 2 != fine.h
            || coarse.w * 2 != fine.w
            || coarse.c != fine.c
            || coarse.b != fine.b
        {
            return Err(shape_err!(
                "BRM needs d_p3 at exactly double the resolution of d_p12: {coarse} vs {fine}"
            ));
        }
        let fused = add(&bilinear_upsample(d_p12, fine.h, fine.w)?, d_p3)?;
        let attention = sigmoid(&self.attention.forward(&global_avg_pool(&fused))?);
        let refined = mul_broadcast(&fused, &attention)?;
        let out = self
            .conv2
            .forward(&self.conv1.forward(&add(&refined, &fused)?, mode)?, mode)?;
        Ok(BrmParts {
            out,
            fused,
            attention,
            refined,
        })
    }

    pub fn forward(&self, d_p12: &Tensor<T>, d_p3: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.forward_parts(d_p12, d_p3, mode)?.out)
    }
}

impl<T: Float> Module<T> for Brm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole)) {
        self.attention.visit(&join(prefix, "attention"), f);
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }
}
