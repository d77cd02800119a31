//! Scale-then-crop plus horizontal flip, applied identically to image and mask.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::error::{CtdError, Result};
use crate::metrics::Map;
use crate::tensor::{bilinear_upsample, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FlipPolicy {
    #[default]
    Random,
    Always,
    Never,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Crop side over resized side; the sample is first resized to
    /// `round(target / crop_fraction)`.
    pub crop_fraction: f64,
    pub flip: FlipPolicy,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_fraction: 0.9,
            flip: FlipPolicy::Random,
        }
    }
}

/// Where an augmented sample came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentTrace {
    pub resized: usize,
    pub offset: (usize, usize),
    pub flipped: bool,
}

/// Bilinear resize of `channels` planes stored contiguously.
pub fn resize_planes(
    data: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Result<Vec<f32>> {
    let t = Tensor::new([1, channels, h, w], data.to_vec())?;
    Ok(bilinear_upsample(&t, oh, ow)?.to_vec())
}

fn crop_flip(
    data: &[f32],
    channels: usize,
    side: usize,
    target: usize,
    trace: &AugmentTrace,
) -> Vec<f32> {
    let (oy, ox) = trace.offset;
    let mut out = Vec::with_capacity(channels * target * target);
    for c in 0..channels {
        for y in 0..target {
            for x in 0..target {
                let sx = if trace.flipped { target - 1 - x } else { x };
                out.push(data[c * side * side + (oy + y) * side + ox + sx]);
            }
        }
    }
    out
}

pub fn augment(
    sample: &Sample,
    rng: &mut ChaCha8Rng,
    target: usize,
    cfg: &AugmentConfig,
) -> Result<Sample> {
    Ok(augment_traced(sample, rng, target, cfg)?.0)
}

pub fn augment_traced(
    sample: &Sample,
    rng: &mut ChaCha8Rng,
    target: usize,
    cfg: &AugmentConfig,
) -> Result<(Sample, AugmentTrace)> {
    if target == 0 || !target.is_multiple_of(32) {
        return Err(CtdError::Config(format!(
            "augment target {target} must be a positive multiple of 32"
        )));
    }
    if !(cfg.crop_fraction > 0.0 && cfg.crop_fraction <= 1.0) {
        return Err(CtdError::Config(format!(
            "crop fraction {} must lie in (0, 1]",
            cfg.crop_fraction
        )));
    }
    let resized = (target as f64 / cfg.crop_fraction).round() as usize;
    if resized < target {
        return Err(CtdError::Config(
            "crop policy yields a source smaller than the target".into(),
        ));
    }
    let (h, w) = (sample.height, sample.width);
    let image = resize_planes(&sample.image, 3, h, w, resized, resized)?;
    let mask = resize_planes(&sample.mask.data, 1, h, w, resized, resized)?;
    let offset = (
        rng.random_range(0..=resized - target),
        rng.random_range(0..=resized - target),
    );
    let flipped = match cfg.flip {
        FlipPolicy::Random => rng.random_bool(0.5),
        FlipPolicy::Always => true,
        FlipPolicy::Never => false,
    };
    let trace = AugmentTrace {
        resized,
        offset,
        flipped,
    };
    let image = crop_flip(&image, 3, resized, target, &trace);
    let mask: Vec<f32> = crop_flip(&mask, 1, resized, target, &trace)
        .into_iter()
        .map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
        .collect();
    let mask = Map::new(target, target, mask)?;
    Ok((
        Sample::new(sample.id.clone(), target, target, image, mask)?,
        trace,
    ))
}
