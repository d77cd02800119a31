//! The full CTD network: encoder, semantic/spatial/boundary paths, CAM (or
//! the conv-3 substitute), BRM and six prediction heads.

mod variant;

pub use variant::{VariantConfig, VariantName};

use crate::backbone::{Encoder, StageFeatures};
use crate::error::{shape_err, CtdError, Result};
use crate::nn::{
    join, Brm, Cam, ConvBnRelu, Ffm, Mode, Module, ParamInit, PredictionHead, Sam, Sap, TensorRole,
};
use crate::tensor::{add, bilinear_upsample, global_avg_pool, Float, Tensor};

/// Names of the six heads in canonical order.
pub const HEAD_NAMES: [&str; 6] = ["d_p123", "d_p12", "d_p1", "e_g5", "e6", "d_p3"];

/// One supervised head: the decoder feature and its sigmoid prediction.
#[derive(Clone, Debug)]
pub struct Head<T: Float> {
    pub feature: Tensor<T>,
    pub prediction: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct HeadOutputs<T: Float> {
    pub d_p123: Head<T>,
    pub d_p12: Head<T>,
    pub d_p1: Head<T>,
    pub e_g5: Head<T>,
    pub e6: Head<T>,
    pub d_p3: Head<T>,
}

impl<T: Float> HeadOutputs<T> {
    /// Heads in [`HEAD_NAMES`] order.
    pub fn heads(&self) -> [(&'static str, &Head<T>); 6] {
        [
            ("d_p123", &self.d_p123),
            ("d_p12", &self.d_p12),
            ("d_p1", &self.d_p1),
            ("e_g5", &self.e_g5),
            ("e6", &self.e6),
            ("d_p3", &self.d_p3),
        ]
    }

    /// The five saliency predictions, `d_p123` first.
    pub fn saliency_predictions(&self) -> [&Tensor<T>; 5] {
        [
            &self.d_p123.prediction,
            &self.d_p12.prediction,
            &self.d_p1.prediction,
            &self.e_g5.prediction,
            &self.e6.prediction,
        ]
    }

    pub fn boundary_prediction(&self) -> &Tensor<T> {
        &self.d_p3.prediction
    }
}

/// Multi-scale context ahead of a projection to the decoder width, or a plain
/// 3×3 unit when SAP is disabled.
#[derive(Debug)]
pub struct ContextProjection<T: Float> {
    pub sap: Option<Sap>,
    pub proj: ConvBnRelu<T>,
}

impl<T: Float> ContextProjection<T> {
    fn new(init: &mut ParamInit, variant: &VariantConfig, cin: usize, with_sap: bool) -> Self {
        if with_sap {
            let sap = Sap::new(variant.sap);
            let proj = ConvBnRelu::same(
                init,
                sap.out_channels(cin),
                variant.c_dec,
                variant.sap_projection_kernel,
            );
            ContextProjection {
                sap: Some(sap),
                proj,
            }
        } else {
            ContextProjection {
                sap: None,
                proj: ConvBnRelu::same(init, cin, variant.c_dec, 3),
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match &self.sap {
            Some(sap) => self.proj.forward(&sap.forward(x)?, mode),
            None => self.proj.forward(x, mode),
        }
    }
}

impl<T: Float> Module<T> for ContextProjection<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole)) {
        self.proj.visit(prefix, f);
    }
}

pub struct SemanticOut<T: Float> {
    pub d_p1: Tensor<T>,
    pub e_g5: Tensor<T>,
    pub e6: Tensor<T>,
}

#[derive(Debug)]
pub struct SemanticPath<T: Float> {
    pub global_proj: ConvBnRelu<T>,
    pub ctx5: ContextProjection<T>,
    pub ctx4: ContextProjection<T>,
    pub ffm1: Ffm<T>,
    pub ffm2: Ffm<T>,
}

impl<T: Float> SemanticPath<T> {
    fn new(init: &mut ParamInit, v: &VariantConfig, c4: usize, c5: usize) -> Self {
        SemanticPath {
            global_proj: ConvBnRelu::same(init, c5, v.c_dec, 1),
            ctx5: ContextProjection::new(init, v, c5, v.sap_enabled),
            ctx4: ContextProjection::new(init, v, c4, v.sap_enabled),
            ffm1: Ffm::new(init, v.c_dec),
            ffm2: Ffm::new(init, v.c_dec),
        }
    }

    pub fn forward(&self, e4: &Tensor<T>, e5: &Tensor<T>, mode: Mode) -> Result<SemanticOut<T>> {
        let (s4, s5) = (e4.shape(), e5.shape());
        if s4.h != 2 * s5.h || s4.w != 2 * s5.w {
            return Err(shape_err!(
                "semantic path needs e4 at twice e5's resolution: {s4} vs {s5}"
            ));
        }
        let g = self.global_proj.forward(&global_avg_pool(e5), mode)?;
        let e6 = bilinear_upsample(&g, s5.h, s5.w)?;
        let e_g5 = self
            .ffm1
            .forward(&self.ctx5.forward(e5, mode)?, &e6, mode)?;
        let up = bilinear_upsample(&e_g5, s4.h, s4.w)?;
        let d_p1 = self
            .ffm2
            .forward(&self.ctx4.forward(e4, mode)?, &up, mode)?;
        Ok(SemanticOut { d_p1, e_g5, e6 })
    }
}

impl<T: Float> Module<T> for SemanticPath<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole)) {
        self.global_proj.visit(&join(prefix, "global_proj"), f);
        self.ctx5.visit(&join(prefix, "proj5"), f);
        self.ctx4.visit(&join(prefix, "proj4"), f);
        self.ffm1.visit(&join(prefix, "ffm1"), f);
        self.ffm2.visit(&join(prefix, "ffm2"), f);
    }
}

#[derive(Debug)]
pub struct SpatialPath<T: Float> {
    /// SAP plus projection on E^3 (L only).
    pub ctx3: Option<ContextProjection<T>>,
    pub sam: Sam<T>,
}

impl<T: Float> SpatialPath<T> {
    fn new(init: &mut ParamInit, v: &VariantConfig, c3: usize) -> Self {
        let ctx3 = v
            .extra_e3_sap
            .then(|| ContextProjection::new(init, v, c3, true));
        let sam_in = if ctx3.is_some() { v.c_dec } else { c3 };
        SpatialPath {
            ctx3,
            sam: Sam::new(init, sam_in, v.c_dec),
        }
    }

    pub fn forward(&self, e3: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match &self.ctx3 {
            Some(ctx) => self.sam.forward(&ctx.forward(e3, mode)?, mode),
            None => self.sam.forward(e3, mode),
        }
    }
}

impl<T: Float> Module<T> for SpatialPath<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole)) {
        self.ctx3.visit(&join(prefix, "proj3"), f);
        self.sam.visit(&join(prefix, "sam"), f);
    }
}

#[derive(Debug)]
pub struct BoundaryPath<T: Float> {
    /// SAM refining E^2 (L only).
    pub sam2: Option<Sam<T>>,
    pub proj2: ConvBnRelu<T>,
    pub ffm3: Ffm<T>,
}

impl<T: Float> BoundaryPath<T> {
    fn new(init: &mut ParamInit, v: &VariantConfig, c2: usize) -> Self {
        let sam2 = v.extra_e2_sam.then(|| Sam::new(init, c2, v.c_dec));
        let proj_in = if sam2.is_some() { v.c_dec } else { c2 };
        BoundaryPath {
            sam2,
            proj2: ConvBnRelu::same(init, proj_in, v.c_dec, 1),
            ffm3: Ffm::new(init, v.c_dec),
        }
    }

    pub fn forward(&self, e2: &Tensor<T>, e_g5: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (s2, sg) = (e2.shape(), e_g5.shape());
        if s2.h != 8 * sg.h || s2.w != 8 * sg.w {
            return Err(shape_err!(
                "boundary path needs e2 at 8x e_g5's resolution: {s2} vs {sg}"
            ));
        }
        let x = match &self.sam2 {
            Some(sam) => sam.forward(e2, mode)?,
            None => e2.clone(),
        };
        let up = bilinear_upsample(e_g5, s2.h, s2.w)?;
        self.ffm3.forward(&self.proj2.forward(&x, mode)?, &up, mode)
    }
}

impl<T: Float> Module<T> for BoundaryPath<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole)) {
        self.sam2.visit(&join(prefix, "sam2"), f);
        self.proj2.visit(&join(prefix, "proj2"), f);
        self.ffm3.visit(&join(prefix, "ffm3"), f);
    }
}

/// Merge of `d_p1` with `d_p2`.
#[derive(Debug)]
pub enum Merge<T: Float> {
    Cam(Cam<T>),
    /// `ConvBNReLU3×3(Up(d_p1) + d_p2)`.
    Conv3(ConvBnRelu<T>),
}

impl<T: Float> Merge<T> {
    pub fn forward(&self, d_p1: &Tensor<T>, d_p2: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            Merge::Cam(cam) => cam.forward(d_p1, d_p2, mode),
            Merge::Conv3(conv) => {
                let s = d_p2.shape();
                let (c, f) = (d_p1.shape(), s);
                if c.h * 2 != f.h || c.w * 2 != f.w {
                    return Err(shape_err!(
                        "conv-3 merge needs d_p1 at half of d_p2: {c} vs {f}"
                    ));
                }
                conv.forward(&add(&bilinear_upsample(d_p1, s.h, s.w)?, d_p2)?, mode)
            }
        }
    }
}

impl<T: Float> Module<T> for Merge<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole)) {
        match self {
            Merge::Cam(cam) => cam.visit(&join(prefix, "cam"), f),
            Merge::Conv3(conv) => conv.visit(&join(prefix, "conv3"), f),
        }
    }
}

#[derive(Debug)]
pub struct Heads<T: Float> {
    pub heads: Vec<PredictionHead<T>>,
}

impl<T: Float> Module<T> for Heads<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole)) {
        for (name, head) in HEAD_NAMES.iter().zip(&self.heads) {
            head.visit(&join(prefix, name), f);
        }
    }
}

#[derive(Debug)]
pub struct Ctd<T: Float> {
    pub variant: VariantConfig,
    /// Absent for decoder-only models over structural backbones.
    pub encoder: Option<Encoder<T>>,
    pub semantic: SemanticPath<T>,
    pub spatial: SpatialPath<T>,
    pub boundary: BoundaryPath<T>,
    pub merge: Merge<T>,
    pub brm: Brm<T>,
    pub heads: Heads<T>,
}

impl<T: Float> Ctd<T> {
    /// Builds a seeded model. Structural-only backbones are rejected.
    pub fn new(variant: &VariantConfig, seed: u64) -> Result<Self> {
        variant.validate()?;
        let mut init = ParamInit::new(seed);
        let encoder = Some(Encoder::new(&variant.backbone, &mut init)?);
        Ok(Self::with_encoder(variant, encoder, &mut init))
    }

    /// Decoder and heads only, sized for `variant`'s stage widths. Works for
    /// every backbone kind; use [`Ctd::decode`] on supplied stage features.
    pub fn decoder_only(variant: &VariantConfig, seed: u64) -> Result<Self> {
        variant.validate()?;
        Ok(Self::with_encoder(variant, None, &mut ParamInit::new(seed)))
    }

    fn with_encoder(
        variant: &VariantConfig,
        encoder: Option<Encoder<T>>,
        init: &mut ParamInit,
    ) -> Self {
        let [c2, c3, c4, c5] = variant.backbone.channels();
        let v = variant;
        let semantic = SemanticPath::new(init, v, c4, c5);
        let spatial = SpatialPath::new(init, v, c3);
        let boundary = BoundaryPath::new(init, v, c2);
        let merge = if v.cam_substituted_by_conv3 {
            Merge::Conv3(ConvBnRelu::same(init, v.c_dec, v.c_dec, 3))
        } else {
            Merge::Cam(Cam::new(init, v.c_dec))
        };
        let brm = Brm::new(init, v.c_dec);
        let heads = Heads {
            heads: (0..6).map(|_| PredictionHead::new(init, v.c_dec)).collect(),
        };
        Ctd {
            variant: variant.clone(),
            encoder,
            semantic,
            spatial,
            boundary,
            merge,
            brm,
            heads,
        }
    }

    pub fn decode(&self, f: &StageFeatures<T>, mode: Mode) -> Result<HeadOutputs<T>> {
        let sem = self.semantic.forward(&f.e4, &f.e5, mode)?;
        let d_p2 = self.spatial.forward(&f.e3, mode)?;
        let d_p3 = self.boundary.forward(&f.e2, &sem.e_g5, mode)?;
        let d_p12 = self.merge.forward(&sem.d_p1, &d_p2, mode)?;
        let d_p123 = self.brm.forward(&d_p12, &d_p3, mode)?;
        let features = [d_p123, d_p12, sem.d_p1, sem.e_g5, sem.e6, d_p3];
        let mut heads = features
            .into_iter()
            .zip(&self.heads.heads)
            .map(|(feature, head)| {
                Ok(Head {
                    prediction: head.forward(&feature)?,
                    feature,
                })
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter();
        let mut next = || heads.next().expect("six heads");
        Ok(HeadOutputs {
            d_p123: next(),
            d_p12: next(),
            d_p1: next(),
            e_g5: next(),
            e6: next(),
            d_p3: next(),
        })
    }

    pub fn forward(&self, image: &Tensor<T>, mode: Mode) -> Result<HeadOutputs<T>> {
        let encoder = self.encoder.as_ref().ok_or_else(|| {
            CtdError::UnsupportedForward(format!(
                "{} (decoder-only model)",
                self.variant.backbone.kind
            ))
        })?;
        let features = encoder.forward(image, mode)?;
        self.decode(&features, mode)
    }

    /// `d_p123` upsampled to the input resolution, in eval mode.
    pub fn predict_saliency(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.predict_maps(image)?.0)
    }

    /// Full-resolution `(saliency, boundary)` maps, in eval mode and detached.
    pub fn predict_maps(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let image = image.detach();
        let out = self.forward(&image, Mode::Eval)?;
        let s = image.shape();
        let sal = bilinear_upsample(&out.d_p123.prediction, s.h, s.w)?.detach();
        let bnd = bilinear_upsample(&out.d_p3.prediction, s.h, s.w)?.detach();
        Ok((sal, bnd))
    }
}

impl<T: Float> Module<T> for Ctd<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>, TensorRole)) {
        if let Some(e) = &self.encoder {
            e.visit(&join(prefix, "encoder"), f);
        }
        self.semantic.visit(&join(prefix, "semantic"), f);
        self.spatial.visit(&join(prefix, "spatial"), f);
        self.boundary.visit(&join(prefix, "boundary"), f);
        self.merge.visit(&join(prefix, "fusion"), f);
        self.brm.visit(&join(prefix, "fusion.brm"), f);
        self.heads.visit(&join(prefix, "heads"), f);
    }
}

/// Builds the model for `variant` and runs it once.
pub fn ctd_forward<T: Float>(
    model: &Ctd<T>,
    image: &Tensor<T>,
    mode: Mode,
) -> Result<HeadOutputs<T>> {
    if image.shape().c != 3 {
        return Err(CtdError::Shape(format!(
            "CTD expects RGB input, got {}",
            image.shape()
        )));
    }
    model.forward(image, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{count_parameters, named_parameters};
    use crate::tensor::{sum_all, Shape};

    fn desk(name: VariantName) -> Ctd<f32> {
        Ctd::new(&VariantConfig::desk(name), 7).unwrap()
    }

    #[test]
    fn desk_head_shapes_for_every_variant() {
        for name in [VariantName::S, VariantName::M, VariantName::L] {
            let model = desk(name);
            let img = Tensor::full([2, 3, 96, 96], 0.3f32);
            let out = model.forward(&img, Mode::Train).unwrap();
            let extents = [24, 12, 6, 3, 3, 24];
            for ((label, head), e) in out.heads().iter().zip(extents) {
                assert_eq!(
                    head.prediction.shape(),
                    Shape::new(2, 1, e, e),
                    "{name} {label}"
                );
                assert_eq!(head.feature.shape().c, 32);
                assert!(head.prediction.to_vec().iter().all(|&p| p > 0.0 && p < 1.0));
            }
        }
    }

    #[test]
    fn zero_e2_gives_zero_boundary_feature() {
        let model = desk(VariantName::M);
        let mut f = model
            .encoder
            .as_ref()
            .unwrap()
            .forward(&Tensor::full([1, 3, 96, 96], 0.5f32), Mode::Eval)
            .unwrap();
        f.e2 = Tensor::zeros(f.e2.shape());
        let out = model.decode(&f, Mode::Eval).unwrap();
        assert!(out.d_p3.feature.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn every_parameter_receives_gradient() {
        for name in [VariantName::S, VariantName::M, VariantName::L] {
            let model = desk(name);
            let img = Tensor::from_fn([2, 3, 96, 96], |i| ((i * 37) % 101) as f32 / 101.0);
            let out = model.forward(&img, Mode::Train).unwrap();
            let mut total = sum_all(out.boundary_prediction());
            for p in out.saliency_predictions() {
                total = add(&total, &sum_all(p)).unwrap();
            }
            total.backward().unwrap();
            for (n, t) in named_parameters(&model) {
                assert!(t.has_grad(), "{name}: no gradient on {n}");
            }
        }
    }

    #[test]
    fn structural_backbones_cannot_forward() {
        let err = Ctd::<f32>::new(&VariantConfig::s(), 0).unwrap_err();
        assert!(matches!(err, CtdError::UnsupportedForward(_)));
    }

    #[test]
    fn decoder_only_runs_on_structural_widths() {
        let v = VariantConfig::s();
        let model: Ctd<f32> = Ctd::decoder_only(&v, 0).unwrap();
        let c = v.backbone.channels();
        let stage = |i: usize, s: usize| {
            Tensor::from_fn([1, c[i], 64 / s, 64 / s], |k| (k % 5) as f32 / 5.0)
        };
        let f = StageFeatures {
            e2: stage(0, 4),
            e3: stage(1, 8),
            e4: stage(2, 16),
            e5: stage(3, 32),
        };
        let out = model.decode(&f, Mode::Eval).unwrap();
        assert_eq!(out.d_p123.prediction.shape(), Shape::new(1, 1, 16, 16));
        let err = model
            .forward(&Tensor::zeros([1, 3, 64, 64]), Mode::Eval)
            .unwrap_err();
        assert!(matches!(err, CtdError::UnsupportedForward(_)));
    }

    #[test]
    fn prediction_is_repeatable() {
        let model = desk(VariantName::S);
        let img = Tensor::from_fn([1, 3, 64, 64], |i| (i % 7) as f32 / 7.0);
        let a = model.predict_saliency(&img).unwrap();
        let b = model.predict_saliency(&img).unwrap();
        assert_eq!(a.shape(), Shape::new(1, 1, 64, 64));
        assert!(a.same_values(&b));
        assert!(count_parameters(&model) > 0);
    }
}
