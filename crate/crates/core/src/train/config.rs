//! Training configuration and its flat `key=value` file format.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::{BackboneConfig, BackboneKind};
use crate::data::SyntheticSpec;
use crate::error::{CtdError, Result};
use crate::loss::LossWeights;
use crate::model::{VariantConfig, VariantName};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: VariantConfig,
    /// Dataset directory; synthetic scenes are generated when absent.
    pub dataset: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub synthetic_count: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fixed step budget; overrides `epochs` when set.
    pub steps: Option<usize>,
    /// Train on the first batch only, without augmentation.
    pub fixed_batch: bool,
    pub augment: bool,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_backbone: f64,
    pub lr_rest: f64,
    pub warmup_frac: f64,
    pub seed: u64,
    pub loss: LossWeights,
    /// Steps between checkpoints; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: VariantConfig::m(),
            dataset: None,
            synthetic: SyntheticSpec {
                size: 352,
                ..Default::default()
            },
            synthetic_count: 256,
            batch_size: 32,
            epochs: 48,
            steps: None,
            fixed_batch: false,
            augment: true,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_backbone: 5e-3,
            lr_rest: 5e-2,
            warmup_frac: 0.05,
            seed: 0,
            loss: LossWeights::default(),
            checkpoint_every: 0,
            out_dir: PathBuf::from("runs/ctd"),
        }
    }
}

impl TrainConfig {
    /// Tiny backbone, 96×96, batch 4, 300 steps, both learning rates doubled.
    pub fn desk(name: VariantName) -> Self {
        TrainConfig {
            variant: VariantConfig::desk(name),
            synthetic: SyntheticSpec {
                size: 96,
                ..Default::default()
            },
            synthetic_count: 32,
            batch_size: 4,
            steps: Some(300),
            lr_backbone: 1e-2,
            lr_rest: 1e-1,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.variant.validate()?;
        self.loss.validate()?;
        self.synthetic.validate()?;
        let bad = |m: String| Err(CtdError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr_backbone > 0.0 && self.lr_rest > 0.0) {
            return bad(format!(
                "learning rates must be positive, got {} / {}",
                self.lr_backbone, self.lr_rest
            ));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return bad(format!(
                "warmup_frac must lie in (0, 1), got {}",
                self.warmup_frac
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must lie in [0, 1) and weight_decay be >= 0".into());
        }
        if self.steps == Some(0) || (self.steps.is_none() && self.epochs == 0) {
            return bad("training needs at least one step".into());
        }
        if self.dataset.is_none() && self.synthetic_count == 0 {
            return bad("synthetic dataset is empty".into());
        }
        Ok(())
    }

    /// Optimizer steps for a dataset of `samples` images.
    pub fn total_steps(&self, samples: usize) -> usize {
        if let Some(s) = self.steps {
            return s;
        }
        let per_epoch = if self.fixed_batch {
            1
        } else {
            samples.div_ceil(self.batch_size).max(1)
        };
        self.epochs * per_epoch
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CtdError::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses `key=value` lines (`#` starts a comment). `preset` and
    /// `variant` pick the base configuration; other keys override it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CtdError::Config(format!("line {}: expected key=value, got `{line}`", n + 1))
            })?;
            pairs.insert(k.trim().to_string(), v.trim().to_string());
        }
        let name: VariantName = pairs
            .get("variant")
            .map_or(Ok(VariantName::M), |v| v.parse())?;
        let mut cfg = match pairs.get("preset").map(String::as_str) {
            Some("desk") => Self::desk(name),
            Some(other) => return Err(CtdError::Config(format!("unknown preset `{other}`"))),
            None => TrainConfig {
                variant: VariantConfig::named(name),
                ..Default::default()
            },
        };
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
            v.parse()
                .map_err(|_| CtdError::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "1" | "true" | "yes" => Ok(true),
                "0" | "false" | "no" => Ok(false),
                _ => Err(CtdError::Config(format!(
                    "`{key}`: expected a boolean, got `{value}`",
                    value = v
                ))),
            }
        }
        match key {
            "preset" | "variant" => {}
            "backbone" => {
                let kind: BackboneKind = value.parse()?;
                self.variant.backbone = BackboneConfig::for_kind(kind);
            }
            "width" => self.variant.backbone.width_multiplier = num(key, value)?,
            "c_dec" => self.variant.c_dec = num(key, value)?,
            "resolution" => {
                self.variant.input_resolution = num(key, value)?;
                self.synthetic.size = self.variant.input_resolution;
            }
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "synthetic_count" => self.synthetic_count = num(key, value)?,
            "synthetic_size" => self.synthetic.size = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "steps" => self.steps = Some(num(key, value)?),
            "fixed_batch" => self.fixed_batch = flag(key, value)?,
            "augment" => self.augment = flag(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "lr_backbone" => self.lr_backbone = num(key, value)?,
            "lr_rest" => self.lr_rest = num(key, value)?,
            "warmup_frac" => self.warmup_frac = num(key, value)?,
            "seed" => {
                self.seed = num(key, value)?;
                self.synthetic.seed = self.seed;
            }
            "beta" => self.loss.beta = num(key, value)?,
            "gamma" => self.loss.gamma = num(key, value)?,
            "boundary_weight" => self.loss.boundary = num(key, value)?,
            "alpha" => {
                let v: Vec<f64> = value
                    .split(',')
                    .map(|x| num(key, x.trim()))
                    .collect::<Result<_>>()?;
                self.loss.alpha = v.try_into().map_err(|_| {
                    CtdError::Config("`alpha` needs five comma-separated values".into())
                })?;
            }
            "reduction" => self.loss.reduction = value.parse()?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => return Err(CtdError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::Reduction;

    #[test]
    fn parses_desk_file_with_overrides() {
        let cfg = TrainConfig::parse(
            "# desk run\npreset = desk\nvariant = S\nsteps = 10\nalpha = 1,0,0,0,0\nreduction = sum\n",
        )
        .unwrap();
        assert_eq!(cfg.variant.name, VariantName::S);
        assert_eq!(cfg.variant.input_resolution, 96);
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.steps, Some(10));
        assert_eq!(cfg.loss.alpha, [1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(cfg.loss.reduction, Reduction::Sum);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig::parse("bogus=1").is_err());
        assert!(TrainConfig::parse("preset=desk\nresolution=100").is_err());
        assert!(TrainConfig::parse("preset=desk\nbatch_size=0").is_err());
        assert!(TrainConfig::parse("preset=desk\nlr_rest=0").is_err());
        assert!(TrainConfig::parse("no equals sign").is_err());
    }

    #[test]
    fn step_budget() {
        let mut cfg = TrainConfig::default();
        assert_eq!(cfg.total_steps(100), 48 * 4);
        cfg.steps = Some(7);
        assert_eq!(cfg.total_steps(100), 7);
    }
}
