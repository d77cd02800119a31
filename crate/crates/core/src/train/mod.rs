//! Training loop, evaluation and inference.

mod checkpoint;
mod config;
mod optim;

pub use checkpoint::{Checkpoint, ManifestEntry};
pub use config::TrainConfig;
pub use optim::{lr_schedule, Sgd};

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{self, augment, generate_dataset, resize_planes, AugmentConfig, Sample};
use crate::error::{CtdError, Result};
use crate::loss::total_loss;
use crate::metrics::{EvalPair, Map, MetricsReport};
use crate::model::Ctd;
use crate::nn::{named_parameters, Mode};
use crate::tensor::Tensor;

/// Stacked network inputs and targets.
pub struct Batch {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub boundary: Tensor<f32>,
}

/// Stacks equal-sized samples into `(B, 3, H, W)` and `(B, 1, H, W)` tensors.
pub fn make_batch(samples: &[&Sample]) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| CtdError::Usage("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    if samples.iter().any(|s| (s.height, s.width) != (h, w)) {
        return Err(CtdError::Shape("batch samples differ in size".into()));
    }
    let b = samples.len();
    let cat =
        |f: &dyn Fn(&Sample) -> &[f32]| samples.iter().flat_map(|s| f(s).iter().copied()).collect();
    Ok(Batch {
        image: Tensor::new([b, 3, h, w], cat(&|s| &s.image))?,
        mask: Tensor::new([b, 1, h, w], cat(&|s| &s.mask.data))?,
        boundary: Tensor::new([b, 1, h, w], cat(&|s| &s.boundary.data))?,
    })
}

/// Resizes a sample to `size × size` without cropping or flipping.
pub fn resize_sample(s: &Sample, size: usize) -> Result<Sample> {
    if (s.height, s.width) == (size, size) {
        return Ok(s.clone());
    }
    let image = resize_planes(&s.image, 3, s.height, s.width, size, size)?;
    let mask = resize_planes(&s.mask.data, 1, s.height, s.width, size, size)?
        .into_iter()
        .map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
        .collect();
    Sample::new(s.id.clone(), size, size, image, Map::new(size, size, mask)?)
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    /// Learning rate of the non-backbone group.
    pub lr: f64,
    pub total: f64,
    pub iou: f64,
    pub bce: f64,
    pub l1: f64,
    pub bnd: f64,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} lr={:e} total={:e} iou={:e} bce={:e} l1={:e} bnd={:e}",
            self.step, self.lr, self.total, self.iou, self.bce, self.l1, self.bnd
        )
    }
}

impl StepLog {
    pub fn parse(line: &str) -> Result<Self> {
        let bad = || CtdError::Validation(format!("bad log line `{line}`"));
        let keys = ["step", "lr", "total", "iou", "bce", "l1", "bnd"];
        let mut vals = [0.0f64; 7];
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() != keys.len() {
            return Err(bad());
        }
        for ((field, key), slot) in fields.iter().zip(keys).zip(&mut vals) {
            let v = field
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .ok_or_else(bad)?;
            *slot = v.parse().map_err(|_| bad())?;
        }
        let step = fields[0][5..].parse().map_err(|_| bad())?;
        Ok(StepLog {
            step,
            lr: vals[1],
            total: vals[2],
            iou: vals[3],
            bce: vals[4],
            l1: vals[5],
            bnd: vals[6],
        })
    }
}

pub struct TrainOutcome {
    pub model: Ctd<f32>,
    pub checkpoint: Checkpoint,
    pub checkpoint_path: Option<PathBuf>,
    pub log: Vec<StepLog>,
}

/// Learning-rate group of a parameter: 0 for the encoder, 1 otherwise.
pub fn param_group(name: &str) -> usize {
    if name.starts_with("encoder.") {
        0
    } else {
        1
    }
}

/// Loads the configured dataset or generates the synthetic one.
pub fn load_training_data(cfg: &TrainConfig) -> Result<Vec<Sample>> {
    match &cfg.dataset {
        Some(dir) => data::load_dataset(dir),
        None => generate_dataset(&cfg.synthetic, cfg.synthetic_count),
    }
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let samples = load_training_data(cfg)?;
    run_training(cfg, &samples, Some(&cfg.out_dir))
}

/// Trains on `samples`. With `out`, writes `train.log` and checkpoints there.
pub fn run_training(
    cfg: &TrainConfig,
    samples: &[Sample],
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(CtdError::Config("training dataset is empty".into()));
    }
    let res = cfg.variant.input_resolution;
    let model: Ctd<f32> = Ctd::new(&cfg.variant, cfg.seed)?;
    let params = named_parameters(&model)
        .into_iter()
        .map(|(name, t)| (t, param_group(&name)))
        .collect();
    let mut opt = Sgd::new(params, cfg.momentum, cfg.weight_decay);
    let total = cfg.total_steps(samples.len());

    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| CtdError::io(dir, e))?;
            let p = dir.join("train.log");
            Some((fs::File::create(&p).map_err(|e| CtdError::io(&p, e))?, p))
        }
        None => None,
    };
    let ckpt_path = out.map(|d| d.join("model.ckpt"));
    let mut last_good: Option<PathBuf> = None;

    let fixed: Option<Vec<Sample>> = if cfg.fixed_batch {
        Some(
            samples
                .iter()
                .take(cfg.batch_size)
                .map(|s| resize_sample(s, res))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = Vec::new();
    let aug_cfg = AugmentConfig::default();
    let mut log = Vec::with_capacity(total);

    for step in 0..total {
        let batch_samples: Vec<Sample> = match &fixed {
            Some(b) => b.clone(),
            None => {
                if order.len() < cfg.batch_size {
                    let mut idx: Vec<usize> = (0..samples.len()).collect();
                    idx.shuffle(&mut rng);
                    order.extend(idx);
                }
                order
                    .drain(..cfg.batch_size.min(order.len()))
                    .map(|i| {
                        if cfg.augment {
                            augment(&samples[i], &mut rng, res, &aug_cfg)
                        } else {
                            resize_sample(&samples[i], res)
                        }
                    })
                    .collect::<Result<_>>()?
            }
        };
        let refs: Vec<&Sample> = batch_samples.iter().collect();
        let batch = make_batch(&refs)?;

        let lr_b = lr_schedule(step, total, cfg.lr_backbone, cfg.warmup_frac);
        let lr_r = lr_schedule(step, total, cfg.lr_rest, cfg.warmup_frac);
        opt.zero_grad();
        let heads = model.forward(&batch.image, Mode::Train)?;
        let loss = total_loss(&heads, &batch.mask, &batch.boundary, &cfg.loss)?;
        let value = loss.total.item()? as f64;
        if !value.is_finite() {
            let last = last_good
                .as_ref()
                .map_or("none".to_string(), |p| p.display().to_string());
            return Err(CtdError::Numerical(format!(
                "non-finite loss at step {step}; last good checkpoint: {last}"
            )));
        }
        loss.total.backward()?;
        opt.step(&[lr_b, lr_r]);

        let entry = StepLog {
            step,
            lr: lr_r,
            total: value,
            iou: loss.iou,
            bce: loss.bce,
            l1: loss.l1,
            bnd: loss.boundary,
        };
        if let Some((f, p)) = &mut log_file {
            writeln!(f, "{entry}").map_err(|e| CtdError::io(&*p, e))?;
        }
        log.push(entry);

        if let Some(path) = &ckpt_path {
            if cfg.checkpoint_every > 0
                && (step + 1) % cfg.checkpoint_every == 0
                && step + 1 < total
            {
                Checkpoint::capture(&model, cfg.seed, step as u64 + 1).save(path)?;
                last_good = Some(path.clone());
            }
        }
    }

    let checkpoint = Checkpoint::capture(&model, cfg.seed, total as u64);
    if let Some(path) = &ckpt_path {
        checkpoint.save(path)?;
    }
    Ok(TrainOutcome {
        model,
        checkpoint,
        checkpoint_path: ckpt_path,
        log,
    })
}

/// Saliency and boundary maps of one RGB image at its own size.
pub fn predict_maps(model: &Ctd<f32>, h: usize, w: usize, image: &[f32]) -> Result<(Map, Map)> {
    let res = model.variant.input_resolution;
    let resized = resize_planes(image, 3, h, w, res, res)?;
    let (sal, bnd) = model.predict_maps(&Tensor::new([1, 3, res, res], resized)?)?;
    let back = |t: &Tensor<f32>| -> Result<Map> {
        Map::new(h, w, resize_planes(&t.to_vec(), 1, res, res, h, w)?)
    };
    Ok((back(&sal)?, back(&bnd)?))
}

pub fn evaluate_model(
    model: &Ctd<f32>,
    samples: &[Sample],
    dataset: &str,
) -> Result<MetricsReport> {
    let pairs = samples
        .iter()
        .map(|s| {
            let (sal, _) = predict_maps(model, s.height, s.width, &s.image)?;
            EvalPair::new(sal, s.mask.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::compute(dataset, &pairs, &model.variant.digest())
}

pub fn evaluate_checkpoint(checkpoint: &Path, data_dir: &Path) -> Result<MetricsReport> {
    let model = Checkpoint::load(checkpoint)?.restore()?;
    let samples = data::load_dataset(data_dir)?;
    evaluate_model(&model, &samples, &data_dir.display().to_string())
}

fn find_prediction(dir: &Path, id: &str) -> Option<PathBuf> {
    ["png", "pgm"]
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

/// Scores saved prediction maps (`<pred_dir>/<id>.png|pgm`) against a dataset.
pub fn evaluate_predictions(pred_dir: &Path, data_dir: &Path) -> Result<MetricsReport> {
    let ids = data::read_manifest(data_dir)?;
    let missing: Vec<&str> = ids
        .iter()
        .filter(|id| find_prediction(pred_dir, id).is_none())
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(CtdError::Validation(format!(
            "no prediction for ids: {}",
            missing.join(", ")
        )));
    }
    let pairs = ids
        .iter()
        .map(|id| {
            let pred = data::io::read_gray(&find_prediction(pred_dir, id).expect("checked above"))?;
            let mut gt = data::io::read_gray(&data_dir.join("masks").join(format!("{id}.pgm")))?;
            gt.data
                .iter_mut()
                .for_each(|v| *v = if *v >= 0.5 { 1.0 } else { 0.0 });
            EvalPair::new(pred, gt)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::compute(&data_dir.display().to_string(), &pairs, "predictions")
}

#[derive(Debug, Default)]
pub struct InferSummary {
    pub written: Vec<PathBuf>,
    pub failures: Vec<(PathBuf, CtdError)>,
}

/// Writes `saliency/<stem>.png` and `boundary/<stem>.png` under `out_dir`
/// for each input; unreadable inputs are recorded and skipped.
pub fn infer(model: &Ctd<f32>, inputs: &[PathBuf], out_dir: &Path) -> Result<InferSummary> {
    let sal_dir = out_dir.join("saliency");
    let bnd_dir = out_dir.join("boundary");
    for d in [&sal_dir, &bnd_dir] {
        fs::create_dir_all(d).map_err(|e| CtdError::io(d, e))?;
    }
    let mut summary = InferSummary::default();
    for path in inputs {
        let result = (|| -> Result<PathBuf> {
            let img = data::io::read_rgb(path)?;
            let (sal, bnd) = predict_maps(model, img.height, img.width, &img.data)?;
            let stem = path
                .file_stem()
                .map_or("image".into(), |s| s.to_string_lossy().into_owned());
            let out = sal_dir.join(format!("{stem}.png"));
            data::io::write_png_gray(&out, &sal)?;
            data::io::write_png_gray(&bnd_dir.join(format!("{stem}.png")), &bnd)?;
            Ok(out)
        })();
        match result {
            Ok(p) => summary.written.push(p),
            Err(e) => summary.failures.push((path.clone(), e)),
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;
    use crate::model::VariantName;

    #[test]
    fn log_line_round_trip() {
        let l = StepLog {
            step: 12,
            lr: 0.05,
            total: 1.25,
            iou: 0.5,
            bce: 0.25,
            l1: 0.125,
            bnd: 0.75,
        };
        assert_eq!(StepLog::parse(&l.to_string()).unwrap(), l);
        assert!(StepLog::parse("step=1 lr=0.1").is_err());
    }

    #[test]
    fn short_run_writes_one_log_line_per_step() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = TrainConfig::desk(VariantName::M);
        cfg.steps = Some(3);
        cfg.batch_size = 2;
        cfg.variant = cfg.variant.with_resolution(64);
        let samples = generate_dataset(
            &SyntheticSpec {
                size: 72,
                ..Default::default()
            },
            4,
        )
        .unwrap();
        let out = run_training(&cfg, &samples, Some(dir.path())).unwrap();
        let text = fs::read_to_string(dir.path().join("train.log")).unwrap();
        let lines: Vec<StepLog> = text.lines().map(|l| StepLog::parse(l).unwrap()).collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines, out.log);
        let saved = Checkpoint::load(&dir.path().join("model.ckpt")).unwrap();
        assert_eq!(saved, out.checkpoint);
    }

    #[test]
    fn gt_predictions_score_perfectly() {
        let data = tempfile::tempdir().unwrap();
        let preds = tempfile::tempdir().unwrap();
        let samples = generate_dataset(
            &SyntheticSpec {
                size: 32,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        data::save_dataset(data.path(), &samples).unwrap();
        for s in &samples {
            data::io::write_pgm(&preds.path().join(format!("{}.pgm", s.id)), &s.mask).unwrap();
        }
        let r = evaluate_predictions(preds.path(), data.path()).unwrap();
        assert_eq!((r.mae, r.max_f, r.e_measure), (0.0, 1.0, 1.0));
        fs::remove_file(preds.path().join("000001.pgm")).unwrap();
        let err = evaluate_predictions(preds.path(), data.path()).unwrap_err();
        assert!(matches!(err, CtdError::Validation(m) if m.contains("000001")));
    }
}
