//! Seeded synthetic saliency scenes with integer-only rasterization.

use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::error::{CtdError, Result};
use crate::metrics::Map;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    /// Star-shaped polygon whose vertex radii follow a random walk.
    Blob,
}

impl FromStr for ShapeKind {
    type Err = CtdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipse" => Ok(ShapeKind::Ellipse),
            "rect" | "rectangle" => Ok(ShapeKind::Rectangle),
            "blob" => Ok(ShapeKind::Blob),
            other => Err(CtdError::Config(format!("unknown shape `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    /// Square canvas extent.
    pub size: usize,
    /// Inclusive range of objects per scene.
    pub objects: (usize, usize),
    pub shapes: Vec<ShapeKind>,
    /// Minimum mean per-channel gap between foreground and background color.
    pub contrast: f32,
    /// Amplitude of uniform per-pixel texture noise.
    pub noise: f32,
    pub seed: u64,
    pub max_attempts: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            size: 96,
            objects: (1, 2),
            shapes: vec![ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Blob],
            contrast: 0.35,
            noise: 0.08,
            seed: 0,
            max_attempts: 64,
        }
    }
}

pub const MIN_AREA: f64 = 0.02;
pub const MAX_AREA: f64 = 0.60;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(CtdError::Config(format!(
                "canvas size {} is below 8",
                self.size
            )));
        }
        if self.objects.0 == 0 || self.objects.0 > self.objects.1 {
            return Err(CtdError::Config(
                "object count range must satisfy 1 <= min <= max".into(),
            ));
        }
        if self.shapes.is_empty() {
            return Err(CtdError::Config("shape vocabulary is empty".into()));
        }
        if !(0.0..=0.9).contains(&self.contrast) || !(self.noise >= 0.0) {
            return Err(CtdError::Config(
                "contrast must lie in [0, 0.9] and noise be >= 0".into(),
            ));
        }
        if self.max_attempts == 0 {
            return Err(CtdError::Config("max_attempts must be positive".into()));
        }
        Ok(())
    }
}

/// Unit directions scaled by 1000, every 30 degrees.
const DIRECTIONS: [(i64, i64); 12] = [
    (1000, 0),
    (866, 500),
    (500, 866),
    (0, 1000),
    (-500, 866),
    (-866, 500),
    (-1000, 0),
    (-866, -500),
    (-500, -866),
    (0, -1000),
    (500, -866),
    (866, -500),
];

fn inside_polygon(poly: &[(i64, i64)], x: i64, y: i64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let ((xi, yi), (xj, yj)) = (poly[i], poly[j]);
        if (yi > y) != (yj > y) {
            let lhs = (x - xi) * (yj - yi);
            let rhs = (xj - xi) * (y - yi);
            if (yj > yi && lhs < rhs) || (yj < yi && lhs > rhs) {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn draw_shape(mask: &mut [bool], n: usize, kind: ShapeKind, rng: &mut ChaCha8Rng) {
    let s = n as i64;
    let cx = rng.random_range(s / 5..=s - s / 5);
    let cy = rng.random_range(s / 5..=s - s / 5);
    let (lo, hi) = ((s / 10).max(2), (s / 3).max(3));
    match kind {
        ShapeKind::Ellipse => {
            let rx = rng.random_range(lo..=hi);
            let ry = rng.random_range(lo..=hi);
            for y in 0..s {
                for x in 0..s {
                    let (dx, dy) = (x - cx, y - cy);
                    if (dx * ry).pow(2) + (dy * rx).pow(2) <= (rx * ry).pow(2) {
                        mask[(y * s + x) as usize] = true;
                    }
                }
            }
        }
        ShapeKind::Rectangle => {
            let hw = rng.random_range(lo..=hi);
            let hh = rng.random_range(lo..=hi);
            for y in (cy - hh).max(0)..(cy + hh).min(s) {
                for x in (cx - hw).max(0)..(cx + hw).min(s) {
                    mask[(y * s + x) as usize] = true;
                }
            }
        }
        ShapeKind::Blob => {
            let mut r = rng.random_range(lo..=hi);
            let step = (s / 24).max(1);
            let poly: Vec<(i64, i64)> = DIRECTIONS
                .iter()
                .map(|&(dx, dy)| {
                    r = (r + rng.random_range(-step..=step)).clamp(lo, hi);
                    (cx + dx * r / 1000, cy + dy * r / 1000)
                })
                .collect();
            for y in 0..s {
                for x in 0..s {
                    if inside_polygon(&poly, x, y) {
                        mask[(y * s + x) as usize] = true;
                    }
                }
            }
        }
    }
}

fn color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Deterministic in `(spec.seed, index)`; the rng is seeded with their XOR.
pub fn generate_sample(spec: &SyntheticSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    let n = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ index);
    let mut mask = vec![false; n * n];
    let mut found = false;
    for _ in 0..spec.max_attempts {
        mask.iter_mut().for_each(|m| *m = false);
        let count = rng.random_range(spec.objects.0..=spec.objects.1);
        for _ in 0..count {
            let kind = spec.shapes[rng.random_range(0..spec.shapes.len())];
            draw_shape(&mut mask, n, kind, &mut rng);
        }
        let area = mask.iter().filter(|&&m| m).count() as f64 / (n * n) as f64;
        if (MIN_AREA..=MAX_AREA).contains(&area) {
            found = true;
            break;
        }
    }
    if !found {
        return Err(CtdError::Generation(format!(
            "sample {index}: no scene with foreground area in [{MIN_AREA}, {MAX_AREA}] after {} attempts",
            spec.max_attempts
        )));
    }

    let bg = color(&mut rng);
    let mut fg = color(&mut rng);
    for _ in 0..spec.max_attempts {
        let gap = fg.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum::<f32>() / 3.0;
        if gap >= spec.contrast {
            break;
        }
        fg = color(&mut rng);
    }
    let gap = fg.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum::<f32>() / 3.0;
    if gap < spec.contrast {
        // Push the foreground away from the background.
        fg = bg.map(|b| {
            if b < 0.5 {
                (b + spec.contrast + 0.05).min(1.0)
            } else {
                (b - spec.contrast - 0.05).max(0.0)
            }
        });
    }
    let tilt: f32 = rng.random_range(-0.15..0.15);
    let plane = n * n;
    let mut image = vec![0.0f32; 3 * plane];
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let base = if mask[i] { fg } else { bg };
            let ramp = if mask[i] {
                0.0
            } else {
                tilt * (x as f32 / n as f32 - 0.5)
            };
            for c in 0..3 {
                let noise = if spec.noise > 0.0 {
                    rng.random_range(-spec.noise..=spec.noise)
                } else {
                    0.0
                };
                image[c * plane + i] = (base[c] + ramp + noise).clamp(0.0, 1.0);
            }
        }
    }
    let mask = Map::new(n, n, mask.iter().map(|&m| m as u8 as f32).collect())?;
    Sample::new(format!("{index:06}"), n, n, image, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polygon_test_on_square() {
        let sq = [(0, 0), (4, 0), (4, 4), (0, 4)];
        assert!(inside_polygon(&sq, 2, 2));
        assert!(!inside_polygon(&sq, 5, 2));
        assert!(!inside_polygon(&sq, -1, -1));
    }

    #[test]
    fn same_seed_and_index_are_identical() {
        let spec = SyntheticSpec {
            seed: 11,
            ..Default::default()
        };
        let a = generate_sample(&spec, 3).unwrap();
        let b = generate_sample(&spec, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.image, generate_sample(&spec, 4).unwrap().image);
    }

    #[test]
    fn area_fraction_in_range() {
        let spec = SyntheticSpec {
            seed: 5,
            size: 64,
            ..Default::default()
        };
        for i in 0..20 {
            let s = generate_sample(&spec, i).unwrap();
            let area = s.mask.data.iter().sum::<f32>() as f64 / (64 * 64) as f64;
            assert!((MIN_AREA..=MAX_AREA).contains(&area));
        }
    }

    #[test]
    fn impossible_area_is_generation_error() {
        let spec = SyntheticSpec {
            size: 8,
            objects: (4, 4),
            max_attempts: 1,
            ..Default::default()
        };
        let errors =
            (0..8).filter(|&i| matches!(generate_sample(&spec, i), Err(CtdError::Generation(_))));
        assert!(errors.count() > 0);
    }
}
