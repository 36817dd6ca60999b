//! Run configuration: one TOML document per pretraining run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datapipe::{load_dataset_sized, make_subset, AugmentationConfig, Dataset, DatasetFormat, Normalize, OrderingPlan, Split};
use crate::models::{EncoderConfig, HeadConfig, InputShape, ModelOptions, Variant};
use crate::{CoreError, Result};

pub const DEFAULT_K_CANDIDATES: [usize; 8] = [1, 2, 5, 10, 20, 50, 100, 200];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub format: DatasetFormat,
    pub path: PathBuf,
    /// Fraction of the training split kept, drawn once per subset seed.
    #[serde(default = "one")]
    pub fraction: f64,
    /// Defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<usize>,
}

fn one() -> f64 {
    1.0
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(CoreError::config("dataset.fraction", format!("must be in (0, 1], got {}", self.fraction)));
        }
        Ok(())
    }

    /// The training split (subsetted) or the full validation split.
    pub fn load(&self, split: Split, run_seed: u64) -> Result<Dataset> {
        self.validate()?;
        let ds = load_dataset_sized(&self.path, self.format, split, self.image_size)?;
        if split == Split::Train && self.fraction < 1.0 {
            make_subset(&ds, self.fraction, self.subset_seed.unwrap_or(run_seed))
        } else {
            Ok(ds)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Defaults to `0.3 * batch_size / 256`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 256, lr: None, momentum: 0.9, weight_decay: 0.0 }
    }
}

impl ProbeConfig {
    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or(0.3 * self.batch_size as f64 / 256.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Shorter-side resize before the center crop; defaults to the image side.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resize: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crop: Option<usize>,
    pub batch_size: usize,
    /// Fixed seed for validation-loss views and probe augmentation.
    pub seed: u64,
    pub k_candidates: Vec<usize>,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            resize: None,
            crop: None,
            batch_size: 256,
            seed: 0,
            k_candidates: DEFAULT_K_CANDIDATES.to_vec(),
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Student backbone; defaults to the run's encoder.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub student: Option<EncoderConfig>,
    /// Defaults to `ordering.total_steps`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_steps: Option<usize>,
    pub normalizer_momentum: f64,
    pub normalize: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { student: None, total_steps: None, normalizer_momentum: 0.9, normalize: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub variant: Variant,
    /// Defaults to `0.05 * batch_size / 256`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_lr: Option<f64>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub warmup_epochs: f64,
    /// Defaults to `total_steps / 10`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub heads: HeadConfig,
    #[serde(default)]
    pub model: ModelOptions,
    pub ordering: OrderingPlan,
    #[serde(default)]
    pub augmentation: AugmentationConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub distill: DistillConfig,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    1e-4
}

fn default_log_every() -> usize {
    10
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text)?;
        cfg.ordering.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CoreError::Invalid(format!("config serialization failed: {e}")))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.ordering.seed = seed;
    }

    /// Field-level checks that need no data. Dataset-dependent checks
    /// (chunk counts, input shape) happen when the run starts.
    pub fn validate(&self) -> Result<()> {
        if let Some(lr) = self.base_lr {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(CoreError::config("base_lr", format!("must be positive, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CoreError::config("momentum", "must be in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(CoreError::config("weight_decay", "must be non-negative"));
        }
        if !(self.warmup_epochs.is_finite() && self.warmup_epochs >= 0.0) {
            return Err(CoreError::config("warmup_epochs", "must be non-negative"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(CoreError::config("checkpoint_every", "must be positive"));
        }
        if self.log_every == 0 {
            return Err(CoreError::config("log_every", "must be positive"));
        }
        if self.ordering.total_steps == 0 {
            return Err(CoreError::config("ordering.total_steps", "must be positive"));
        }
        if self.ordering.batch_size < 2 {
            return Err(CoreError::config("ordering.batch_size", "batch norm needs at least 2"));
        }
        if self.eval.batch_size == 0 || self.eval.probe.batch_size < 2 {
            return Err(CoreError::config("eval.batch_size", "must be positive (probe: at least 2)"));
        }
        if self.eval.k_candidates.is_empty() || self.eval.k_candidates.contains(&0) {
            return Err(CoreError::config("eval.k_candidates", "needs positive entries"));
        }
        if !(0.0..1.0).contains(&self.distill.normalizer_momentum) {
            return Err(CoreError::config("distill.normalizer_momentum", "must be in [0, 1)"));
        }
        if let Some(s) = &self.distill.student {
            s.validate()?;
        }
        self.dataset.validate()?;
        self.encoder.validate()?;
        self.heads.resolve(self.encoder.repr_dim)?;
        self.augmentation.validate()?;
        Ok(())
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr.unwrap_or(0.05 * self.ordering.batch_size as f64 / 256.0)
    }

    pub fn checkpoint_every(&self) -> usize {
        self.checkpoint_every.unwrap_or((self.ordering.total_steps / 10).max(1))
    }

    /// Warmup length in steps for a training set of `n` images.
    pub fn warmup_steps(&self, n: usize) -> usize {
        let steps = (self.warmup_epochs * n as f64 / self.ordering.batch_size as f64).round() as usize;
        steps.min(self.ordering.total_steps - 1)
    }

    /// Model input after augmentation.
    pub fn input_shape(&self, ds: &Dataset) -> InputShape {
        let side = self.augmentation.out_size.unwrap_or(ds.height.min(ds.width));
        InputShape { channels: ds.channels, height: side, width: side }
    }

    /// `(resize, crop)` of the evaluation transform. The crop defaults to
    /// the training view side, the resize to the stored image side.
    pub fn eval_geometry(&self, ds: &Dataset) -> (usize, usize) {
        let side = ds.height.min(ds.width);
        let crop = self.eval.crop.unwrap_or(self.augmentation.out_size.unwrap_or(side));
        (self.eval.resize.unwrap_or(side).max(crop), crop)
    }

    pub fn normalize(&self) -> &Normalize {
        &self.augmentation.normalize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
output_dir = "runs/a"
variant = "simsiam"

[dataset]
format = "synthetic-spec"
path = "synth.toml"

[ordering]
mode = "single_pass"
total_steps = 1000
batch_size = 64
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = RunConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(c.ordering.num_chunks, 100);
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.weight_decay, 1e-4);
        assert_eq!(c.warmup_epochs, 0.0);
        assert_eq!(c.checkpoint_every(), 100);
        assert!((c.base_lr() - 0.0125).abs() < 1e-15);
        assert_eq!(c.model.tau, 0.996);
        assert_eq!(c.eval.k_candidates, DEFAULT_K_CANDIDATES.to_vec());
        assert_eq!(c.dataset.fraction, 1.0);
    }

    #[test]
    fn unknown_key_is_named() {
        let text = format!("learnig_rate = 0.1\n{MINIMAL}");
        let err = RunConfig::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("learnig_rate"), "{err}");
        let nested = MINIMAL.replace("batch_size = 64", "batch_size = 64\nchunks = 3");
        let err = RunConfig::from_toml_str(&nested).unwrap_err().to_string();
        assert!(err.contains("chunks"), "{err}");
    }

    #[test]
    fn round_trip_is_identity() {
        let mut c = RunConfig::from_toml_str(MINIMAL).unwrap();
        c.heads.predictor_bottleneck = Some(16);
        c.eval.crop = Some(28);
        let again = RunConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(c, again);
        assert_eq!(again.to_toml_string().unwrap(), c.to_toml_string().unwrap());
    }

    #[test]
    fn invariant_violations_name_the_field() {
        let bad = MINIMAL.replace("variant = \"simsiam\"", "variant = \"simsiam\"\nbase_lr = -1.0");
        match RunConfig::from_toml_str(&bad) {
            Err(CoreError::Config { field, .. }) => assert_eq!(field, "base_lr"),
            other => panic!("{other:?}"),
        }
        let bad = MINIMAL.replace("variant = \"simsiam\"", "variant = \"simsiam\"\nwarmup_epochs = -2.0");
        assert!(matches!(RunConfig::from_toml_str(&bad), Err(CoreError::Config { .. })));
        let missing = MINIMAL.replace("variant = \"simsiam\"", "");
        assert!(RunConfig::from_toml_str(&missing).unwrap_err().to_string().contains("variant"));
    }

    #[test]
    fn warmup_epochs_convert_to_steps() {
        let mut c = RunConfig::from_toml_str(MINIMAL).unwrap();
        c.warmup_epochs = 10.0;
        assert_eq!(c.warmup_steps(640), 100);
        c.warmup_epochs = 1e6;
        assert_eq!(c.warmup_steps(640), 999);
    }
}
