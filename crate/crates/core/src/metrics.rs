//! MAE, max F-measure, E-measure and boundary ground truth.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{CtdError, Result};

/// Single-channel map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Map {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(CtdError::Shape(format!(
                "map data has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Map {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Map {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    fn same_size(&self, other: &Map) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// A prediction in `[0, 1]` and its binary ground truth.
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub prediction: Map,
    pub ground_truth: Map,
}

impl EvalPair {
    pub fn new(prediction: Map, ground_truth: Map) -> Result<Self> {
        if !prediction.same_size(&ground_truth) {
            return Err(CtdError::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                prediction.height, prediction.width, ground_truth.height, ground_truth.width
            )));
        }
        if !ground_truth.is_binary() {
            return Err(CtdError::Validation("ground truth must be binary".into()));
        }
        Ok(EvalPair {
            prediction,
            ground_truth,
        })
    }

    fn pixels(&self) -> impl Iterator<Item = (f64, bool)> + '_ {
        self.prediction
            .data
            .iter()
            .zip(&self.ground_truth.data)
            .map(|(&p, &g)| (p as f64, g == 1.0))
    }
}

/// Mean absolute error of one pair.
pub fn mae(pair: &EvalPair) -> f64 {
    let n = pair.prediction.data.len();
    pair.prediction
        .data
        .iter()
        .zip(&pair.ground_truth.data)
        .map(|(&p, &g)| (p as f64 - g as f64).abs())
        .sum::<f64>()
        / n as f64
}

/// `i / levels` for `i = 1..=levels`.
pub fn thresholds(levels: usize) -> Vec<f64> {
    (1..=levels).map(|i| i as f64 / levels as f64).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FMeasureConfig {
    pub beta_sq: f64,
    pub levels: usize,
    /// F-measure per image, then mean, instead of mean precision/recall.
    pub per_image: bool,
}

impl Default for FMeasureConfig {
    fn default() -> Self {
        FMeasureConfig {
            beta_sq: 0.3,
            levels: 255,
            per_image: false,
        }
    }
}

/// `(1 + β²)·P·R / (β²·P + R)`, 0 when `P + R = 0`.
pub fn f_beta(precision: f64, recall: f64, beta_sq: f64) -> f64 {
    if precision + recall == 0.0 {
        return 0.0;
    }
    (1.0 + beta_sq) * precision * recall / (beta_sq * precision + recall)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub values: Vec<f64>,
    pub max: f64,
    /// Some image hit a zero-denominator convention.
    pub flagged: bool,
}

impl Curve {
    fn from_values(values: Vec<f64>, flagged: bool) -> Self {
        let max = values.iter().copied().fold(0.0, f64::max);
        Curve {
            values,
            max,
            flagged,
        }
    }
}

/// Precision and recall of one image at each threshold. An image without
/// predicted positives has precision 1 if its GT is empty, else 0; an empty
/// GT has recall 1.
fn precision_recall(pair: &EvalPair, ts: &[f64]) -> (Vec<(f64, f64)>, bool) {
    let positives = pair.ground_truth.data.iter().filter(|&&g| g == 1.0).count();
    let pr = ts
        .iter()
        .map(|&t| {
            let (mut tp, mut pp) = (0usize, 0usize);
            for (p, g) in pair.pixels() {
                if p >= t {
                    pp += 1;
                    tp += g as usize;
                }
            }
            let precision = if pp == 0 {
                (positives == 0) as u8 as f64
            } else {
                tp as f64 / pp as f64
            };
            let recall = if positives == 0 {
                1.0
            } else {
                tp as f64 / positives as f64
            };
            (precision, recall)
        })
        .collect();
    (pr, positives == 0)
}

/// F-measure curve over the thresholds and its maximum.
pub fn max_f_measure(pairs: &[EvalPair], cfg: &FMeasureConfig) -> Result<Curve> {
    if pairs.is_empty() {
        return Err(CtdError::Usage("F-measure needs at least one image".into()));
    }
    if !(cfg.beta_sq > 0.0) || cfg.levels == 0 {
        return Err(CtdError::Config(
            "F-measure needs beta_sq > 0 and at least one level".into(),
        ));
    }
    let ts = thresholds(cfg.levels);
    let per: Vec<(Vec<(f64, f64)>, bool)> =
        pairs.par_iter().map(|p| precision_recall(p, &ts)).collect();
    let n = pairs.len() as f64;
    let flagged = per.iter().any(|(_, f)| *f);
    let values = (0..ts.len())
        .map(|i| {
            if cfg.per_image {
                per.iter()
                    .map(|(pr, _)| f_beta(pr[i].0, pr[i].1, cfg.beta_sq))
                    .sum::<f64>()
                    / n
            } else {
                let p = per.iter().map(|(pr, _)| pr[i].0).sum::<f64>() / n;
                let r = per.iter().map(|(pr, _)| pr[i].1).sum::<f64>() / n;
                f_beta(p, r, cfg.beta_sq)
            }
        })
        .collect();
    Ok(Curve::from_values(values, flagged))
}

/// Enhanced-alignment score of a binarized prediction against `gt`.
/// Returns the score and whether the GT was constant.
fn alignment_score(bin: &[bool], gt: &[f32]) -> (f64, bool) {
    let n = gt.len() as f64;
    let mean_p = bin.iter().filter(|&&b| b).count() as f64 / n;
    let mean_g = gt.iter().map(|&g| g as f64).sum::<f64>() / n;
    if mean_g == 0.0 {
        return (1.0 - mean_p, true);
    }
    if mean_g == 1.0 {
        return (mean_p, true);
    }
    let total: f64 = bin
        .iter()
        .zip(gt)
        .map(|(&b, &g)| {
            let fp = b as u8 as f64 - mean_p;
            let fg = g as f64 - mean_g;
            let xi = 2.0 * fp * fg / (fp * fp + fg * fg);
            (1.0 + xi) * (1.0 + xi) / 4.0
        })
        .sum();
    (total / n, false)
}

/// E-measure curve of one image over the given thresholds.
pub fn e_measure(pair: &EvalPair, ts: &[f64]) -> Curve {
    let mut flagged = false;
    let values = ts
        .iter()
        .map(|&t| {
            let bin: Vec<bool> = pair
                .prediction
                .data
                .iter()
                .map(|&p| p as f64 >= t)
                .collect();
            let (score, degenerate) = alignment_score(&bin, &pair.ground_truth.data);
            flagged |= degenerate;
            score
        })
        .collect();
    Curve::from_values(values, flagged)
}

/// Mean E-measure curve over a dataset and its maximum.
pub fn mean_e_measure(pairs: &[EvalPair], levels: usize) -> Result<Curve> {
    if pairs.is_empty() {
        return Err(CtdError::Usage("E-measure needs at least one image".into()));
    }
    let ts = thresholds(levels);
    let curves: Vec<Curve> = pairs.par_iter().map(|p| e_measure(p, &ts)).collect();
    let n = pairs.len() as f64;
    let values = (0..ts.len())
        .map(|i| curves.iter().map(|c| c.values[i]).sum::<f64>() / n)
        .collect();
    Ok(Curve::from_values(values, curves.iter().any(|c| c.flagged)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

/// Inner boundary: foreground pixels with at least one background neighbor,
/// pixels outside the frame counting as background.
pub fn boundary_from_mask(mask: &Map, connectivity: Connectivity) -> Result<Map> {
    if !mask.is_binary() {
        return Err(CtdError::Validation("boundary needs a binary mask".into()));
    }
    let (h, w) = (mask.height as isize, mask.width as isize);
    let fg = |y: isize, x: isize| {
        y >= 0 && x >= 0 && y < h && x < w && mask.at(y as usize, x as usize) == 1.0
    };
    let four: &[(isize, isize)] = &[(-1, 0), (1, 0), (0, -1), (0, 1)];
    let eight: &[(isize, isize)] = &[
        (-1, -1),
        (-1, 0),
        (-1, 1),
        (0, -1),
        (0, 1),
        (1, -1),
        (1, 0),
        (1, 1),
    ];
    let offsets = match connectivity {
        Connectivity::Four => four,
        Connectivity::Eight => eight,
    };
    let mut data = vec![0.0; mask.data.len()];
    for y in 0..h {
        for x in 0..w {
            if fg(y, x) && offsets.iter().any(|&(dy, dx)| !fg(y + dy, x + dx)) {
                data[(y * w + x) as usize] = 1.0;
            }
        }
    }
    Ok(Map {
        height: mask.height,
        width: mask.width,
        data,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub dataset: String,
    pub count: usize,
    pub mae: f64,
    pub max_f: f64,
    pub e_measure: f64,
    pub config_digest: String,
}

const CSV_HEADER: &str = "dataset,count,mae,max_f,e_measure,config_digest";

impl MetricsReport {
    /// Evaluates all pairs with the default protocol.
    pub fn compute(dataset: &str, pairs: &[EvalPair], config_digest: &str) -> Result<Self> {
        let cfg = FMeasureConfig::default();
        let f = max_f_measure(pairs, &cfg)?;
        let e = mean_e_measure(pairs, cfg.levels)?;
        let mae = pairs.iter().map(mae).sum::<f64>() / pairs.len() as f64;
        Ok(MetricsReport {
            dataset: dataset.to_string(),
            count: pairs.len(),
            mae,
            max_f: f.max,
            e_measure: e.max,
            config_digest: config_digest.to_string(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset        {}", self.dataset);
        let _ = writeln!(s, "count          {}", self.count);
        let _ = writeln!(s, "MAE            {:.6}", self.mae);
        let _ = writeln!(s, "mF_beta        {:.6}", self.max_f);
        let _ = writeln!(s, "E_m            {:.6}", self.e_measure);
        let _ = writeln!(s, "config_digest  {}", self.config_digest);
        s
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{CSV_HEADER}\n{},{},{:e},{:e},{:e},{}\n",
            self.dataset, self.count, self.mae, self.max_f, self.e_measure, self.config_digest
        )
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: &str| CtdError::Validation(format!("metrics csv: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(bad("unexpected header"));
        }
        let row = lines.next().ok_or_else(|| bad("missing row"))?;
        let f: Vec<&str> = row.split(',').collect();
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        Ok(MetricsReport {
            dataset: f[0].to_string(),
            count: f[1].parse().map_err(|_| bad("bad count"))?,
            mae: num(f[2])?,
            max_f: num(f[3])?,
            e_measure: num(f[4])?,
            config_digest: f[5].to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, v: &[f32]) -> Map {
        Map::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn f_beta_fixture() {
        assert!((f_beta(0.8, 0.4, 0.3) - 0.65).abs() < 1e-12);
        assert_eq!(f_beta(0.0, 0.0, 0.3), 0.0);
    }

    #[test]
    fn gt_as_prediction_is_perfect() {
        let g = map(2, 3, &[0.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
        let pair = EvalPair::new(g.clone(), g).unwrap();
        assert_eq!(mae(&pair), 0.0);
        let f = max_f_measure(std::slice::from_ref(&pair), &FMeasureConfig::default()).unwrap();
        assert!(f.values.iter().all(|&v| v == 1.0));
        let e = e_measure(&pair, &thresholds(255));
        assert!(e.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_prediction_scores_zero_f() {
        let g = map(1, 4, &[1.0, 1.0, 0.0, 0.0]);
        let pair = EvalPair::new(Map::filled(1, 4, 0.0), g).unwrap();
        let f = max_f_measure(&[pair], &FMeasureConfig::default()).unwrap();
        assert_eq!(f.max, 0.0);
    }

    #[test]
    fn inverted_prediction_e_measure() {
        let g = map(1, 4, &[1.0, 1.0, 0.0, 0.0]);
        let p = map(1, 4, &[0.0, 0.0, 1.0, 1.0]);
        // phi_P = -phi_G everywhere, so xi = -1 and the score is 0.
        let e = e_measure(&EvalPair::new(p, g).unwrap(), &[0.5]);
        assert_eq!(e.values, vec![0.0]);
    }

    #[test]
    fn constant_gt_conventions() {
        let ones = Map::filled(2, 2, 1.0);
        let e = e_measure(&EvalPair::new(ones.clone(), ones).unwrap(), &[0.5]);
        assert_eq!(e.max, 1.0);
        assert!(e.flagged);
    }

    #[test]
    fn boundary_of_centered_block() {
        let mut m = Map::filled(5, 5, 0.0);
        for y in 1..4 {
            for x in 1..4 {
                m.data[y * 5 + x] = 1.0;
            }
        }
        let b = boundary_from_mask(&m, Connectivity::Four).unwrap();
        assert_eq!(b.data.iter().filter(|&&v| v == 1.0).count(), 8);
        assert_eq!(b.at(2, 2), 0.0);
        let full = boundary_from_mask(&Map::filled(4, 4, 1.0), Connectivity::Four).unwrap();
        assert_eq!(full.data.iter().filter(|&&v| v == 1.0).count(), 12);
        assert!(boundary_from_mask(&Map::filled(2, 2, 0.5), Connectivity::Four).is_err());
    }

    #[test]
    fn report_round_trips_through_csv() {
        let r = MetricsReport {
            dataset: "synthetic".into(),
            count: 3,
            mae: 0.1234567891234,
            max_f: 0.75,
            e_measure: 0.8,
            config_digest: "abcd".into(),
        };
        assert_eq!(MetricsReport::from_csv(&r.to_csv()).unwrap(), r);
    }

    #[test]
    fn empty_input_is_usage_error() {
        assert!(matches!(
            max_f_measure(&[], &FMeasureConfig::default()),
            Err(CtdError::Usage(_))
        ));
    }
}
