//! Samples, synthetic generation, augmentation and the on-disk dataset layout
//! (`images/<id>.png`, `masks/<id>.pgm`, `manifest.txt`).

mod augment;
pub mod io;
mod synth;

pub use augment::{
    augment, augment_traced, resize_planes, AugmentConfig, AugmentTrace, FlipPolicy,
};
pub use synth::{generate_sample, ShapeKind, SyntheticSpec, MAX_AREA, MIN_AREA};

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{CtdError, Result};
use crate::metrics::{boundary_from_mask, Connectivity, Map};
use io::RgbPlanes;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Planar `(3, H, W)` in `[0, 1]`.
    pub image: Vec<f32>,
    pub mask: Map,
    pub boundary: Map,
}

impl Sample {
    /// Builds a sample, deriving the boundary from the mask.
    pub fn new(
        id: String,
        height: usize,
        width: usize,
        image: Vec<f32>,
        mask: Map,
    ) -> Result<Self> {
        if image.len() != 3 * height * width || mask.height != height || mask.width != width {
            return Err(CtdError::Shape(format!(
                "sample {id}: image and mask sizes disagree"
            )));
        }
        let boundary = boundary_from_mask(&mask, Connectivity::Four)?;
        Ok(Sample {
            id,
            height,
            width,
            image,
            mask,
            boundary,
        })
    }
}

/// Samples `0..count` of a synthetic spec, generated in parallel.
pub fn generate_dataset(spec: &SyntheticSpec, count: usize) -> Result<Vec<Sample>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_sample(spec, i))
        .collect()
}

pub fn write_manifest(dir: &Path, ids: &[String]) -> Result<()> {
    let path = dir.join("manifest.txt");
    let mut text = ids.join("\n");
    text.push('\n');
    fs::write(&path, text).map_err(|e| CtdError::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(|e| CtdError::io(&path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| CtdError::io(&p, e))?;
    }
    samples.par_iter().try_for_each(|s| {
        let rgb = RgbPlanes {
            height: s.height,
            width: s.width,
            data: s.image.clone(),
        };
        io::write_png_rgb(&dir.join("images").join(format!("{}.png", s.id)), &rgb)?;
        io::write_pgm(&dir.join("masks").join(format!("{}.pgm", s.id)), &s.mask)
    })?;
    write_manifest(
        dir,
        &samples.iter().map(|s| s.id.clone()).collect::<Vec<_>>(),
    )
}

/// Loads one sample; the mask is binarized at 0.5.
pub fn load_sample(dir: &Path, id: &str) -> Result<Sample> {
    let img = io::read_rgb(&dir.join("images").join(format!("{id}.png")))?;
    let mut mask = io::read_gray(&dir.join("masks").join(format!("{id}.pgm")))?;
    mask.data
        .iter_mut()
        .for_each(|v| *v = if *v >= 0.5 { 1.0 } else { 0.0 });
    if (mask.height, mask.width) != (img.height, img.width) {
        return Err(CtdError::Validation(format!(
            "sample {id}: image {}x{} vs mask {}x{}",
            img.height, img.width, mask.height, mask.width
        )));
    }
    Sample::new(id.to_string(), img.height, img.width, img.data, mask)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let ids = read_manifest(dir)?;
    if ids.is_empty() {
        return Err(CtdError::Config(format!(
            "dataset {} has an empty manifest",
            dir.display()
        )));
    }
    ids.par_iter().map(|id| load_sample(dir, id)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_is_derived_from_mask() {
        let s = generate_sample(&SyntheticSpec::default(), 9).unwrap();
        assert_eq!(
            s.boundary,
            boundary_from_mask(&s.mask, Connectivity::Four).unwrap()
        );
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            size: 32,
            seed: 3,
            ..Default::default()
        };
        let samples = generate_dataset(&spec, 3).unwrap();
        save_dataset(dir.path(), &samples).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.mask, b.mask);
            let err = a
                .image
                .iter()
                .zip(&b.image)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f32::max);
            assert!(err <= 1.0 / 255.0);
        }
    }
}
