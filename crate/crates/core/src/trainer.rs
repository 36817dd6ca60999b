//! Pretraining loop: exactly `total_steps` SGD steps with warmup plus cosine
//! learning rate, periodic checkpoints and a JSONL metrics log.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ncsl_diffcore::{cosine_lr, sgd_step, Checkpoint, DiffError, OptimizerState, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::datapipe::{augment_batch, build_schedule, ChunkSchedule, Dataset, Split};
use crate::models::{build_siamese, Backbone, EncoderConfig, InputShape, SiameseModel};
use crate::rng::{TAG_AUGMENT, TAG_VAL_LOSS};
use crate::{CoreError, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub lr: f64,
    /// Mean training loss over the steps since the previous record.
    pub train_loss: f64,
    pub wall_time_s: f64,
}

/// Linear ramp from 0 to `base_lr` over `warmup_steps`, then cosine decay
/// over the remaining steps.
pub fn warmup_cosine_lr(step: usize, warmup_steps: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if warmup_steps >= total_steps {
        return Err(CoreError::Invalid(format!("warmup of {warmup_steps} steps does not fit in {total_steps}")));
    }
    if step > total_steps {
        return Err(DiffError::StepOutOfRange { step, total: total_steps }.into());
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    Ok(cosine_lr(step - warmup_steps, total_steps - warmup_steps, base_lr)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Siamese,
    Student,
}

/// JSON sidecar written next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub step: usize,
    pub total_steps: usize,
    pub input: InputShape,
    /// Student backbone of a distillation checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student: Option<EncoderConfig>,
    /// Output width of a student's regression head.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<usize>,
    pub config: RunConfig,
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

pub fn read_meta(ckpt: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(ckpt);
    let text = fs::read_to_string(&side).map_err(|e| CoreError::io(&side, e))?;
    let mut meta: CheckpointMeta = serde_json::from_str(&text)?;
    let seed = meta.config.seed;
    meta.config.set_seed(seed);
    Ok(meta)
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    ck.save(path)?;
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(meta)?).map_err(|e| CoreError::io(&side, e))
}

/// Rebuilds a pretrained model from a siamese checkpoint and its sidecar.
pub fn load_siamese(path: &Path) -> Result<(SiameseModel<f32>, CheckpointMeta)> {
    let meta = read_meta(path)?;
    if meta.kind != CheckpointKind::Siamese {
        return Err(CoreError::Invalid(format!("{} is a {:?} checkpoint", path.display(), meta.kind)));
    }
    let c = &meta.config;
    let mut model = build_siamese::<f32>(&c.encoder, &c.heads, c.variant, meta.input, &c.model, c.seed)?;
    model.load_state(&Checkpoint::load(path)?)?;
    Ok((model, meta))
}

/// Backbone of either checkpoint kind.
pub fn load_backbone(path: &Path) -> Result<(Box<dyn Backbone>, CheckpointMeta)> {
    match read_meta(path)?.kind {
        CheckpointKind::Siamese => {
            let (m, meta) = load_siamese(path)?;
            Ok((Box::new(m), meta))
        }
        CheckpointKind::Student => {
            let (s, meta) = crate::distill::load_student(path)?;
            Ok((Box::new(s), meta))
        }
    }
}

/// Evaluation-mode siamese loss over one deterministic pass of paired
/// augmentations of `ds`, averaged per image.
pub fn validation_loss(model: &SiameseModel<f32>, ds: &Dataset, cfg: &RunConfig) -> Result<f64> {
    let b = cfg.eval.batch_size.max(2);
    let all: Vec<usize> = (0..ds.len()).collect();
    let (mut total, mut count) = (0.0, 0usize);
    for (k, idx) in all.chunks(b).enumerate() {
        let (x1, x2) = augment_batch(ds, idx, &cfg.augmentation, cfg.eval.seed, TAG_VAL_LOSS, k as u64)?;
        total += model.eval_loss(&x1, &x2)? * idx.len() as f64;
        count += idx.len();
    }
    if count == 0 {
        return Err(CoreError::Dataset("validation set is empty".into()));
    }
    Ok(total / count as f64)
}

/// Append-only JSONL writer for metrics records.
pub struct MetricsLog {
    path: PathBuf,
    file: File,
}

impl MetricsLog {
    /// Starts an empty log, replacing any previous file.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), file })
    }

    pub fn append_to(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().append(true).create(true).open(path).map_err(|e| CoreError::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), file })
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        writeln!(self.file, "{}", serde_json::to_string(rec)?).map_err(|e| CoreError::io(&self.path, e))?;
        self.file.flush().map_err(|e| CoreError::io(&self.path, e))?;
        log::info!("step {} lr {:.5} loss {:.5}", rec.step, rec.lr, rec.train_loss);
        Ok(())
    }
}

/// Writes the resolved config into the output directory.
pub fn echo_config(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| CoreError::io(out, e))?;
    let path = out.join(CONFIG_FILE);
    fs::write(&path, cfg.to_toml_string()?).map_err(|e| CoreError::io(&path, e))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Steps completed after this one.
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub metrics: PathBuf,
    pub final_loss: f64,
}

pub struct Trainer {
    cfg: RunConfig,
    data: Dataset,
    schedule: ChunkSchedule,
    model: SiameseModel<f32>,
    opt: OptimizerState<f32>,
    step: usize,
    base_lr: f64,
    warmup: usize,
    window_sum: f64,
    window_len: usize,
    wall_offset: f64,
}

impl Trainer {
    /// Loads the training split named in the config.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let data = cfg.dataset.load(Split::Train, cfg.seed)?;
        Self::with_dataset(cfg, data)
    }

    pub fn with_dataset(mut cfg: RunConfig, data: Dataset) -> Result<Self> {
        let seed = cfg.seed;
        cfg.set_seed(seed);
        cfg.validate()?;
        let schedule = build_schedule(&cfg.ordering, data.len())?;
        let input = cfg.input_shape(&data);
        let model = build_siamese::<f32>(&cfg.encoder, &cfg.heads, cfg.variant, input, &cfg.model, cfg.seed)?;
        let opt = OptimizerState::new(model.graph().params(), cfg.momentum, cfg.weight_decay);
        Ok(Self {
            base_lr: cfg.base_lr(),
            warmup: cfg.warmup_steps(data.len()),
            cfg,
            data,
            schedule,
            model,
            opt,
            step: 0,
            window_sum: 0.0,
            window_len: 0,
            wall_offset: 0.0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &SiameseModel<f32> {
        &self.model
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.ordering.total_steps
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        warmup_cosine_lr(step, self.warmup, self.total_steps(), self.base_lr)
    }

    /// One optimizer step on the scheduled batch.
    pub fn step_once(&mut self) -> Result<StepReport> {
        let t = self.step;
        if t >= self.total_steps() {
            return Err(CoreError::Invalid(format!("run already finished {t} steps")));
        }
        let idx = self.schedule.next_batch(t)?;
        let (x1, x2) = augment_batch(&self.data, &idx, &self.cfg.augmentation, self.cfg.seed, TAG_AUGMENT, t as u64)?;
        let lr = self.lr_at(t)?;
        self.model.graph_mut().zero_grad();
        let parts = match self.model.forward(&x1, &x2) {
            Err(CoreError::Diff(DiffError::NonFinite { .. })) => return Err(CoreError::NonFiniteLoss { step: t }),
            other => other?,
        };
        if !parts.loss.is_finite() {
            return Err(CoreError::NonFiniteLoss { step: t });
        }
        self.model.backward()?;
        match sgd_step(self.model.graph_mut().params_mut(), &mut self.opt, lr) {
            Err(DiffError::NonFiniteGradient(_)) => return Err(CoreError::NonFiniteLoss { step: t }),
            other => other?,
        }
        self.model.after_step(&parts)?;
        self.step += 1;
        self.window_sum += parts.loss;
        self.window_len += 1;
        Ok(StepReport { step: self.step, lr, loss: parts.loss })
    }

    /// Closes the current log window.
    fn take_window(&mut self) -> f64 {
        let mean = self.window_sum / self.window_len.max(1) as f64;
        self.window_sum = 0.0;
        self.window_len = 0;
        mean
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.model.save_state(&mut ck);
        ck.put_optimizer("optim/", self.model.graph(), &self.opt);
        let state = [self.step as f64, self.window_sum, self.window_len as f64];
        ck.insert_tensor("trainer/state", &Tensor::<f64>::from_f64(&[3], &state).expect("3 values"));
        ck
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            kind: CheckpointKind::Siamese,
            step: self.step,
            total_steps: self.total_steps(),
            input: self.model.input,
            student: None,
            head_dim: None,
            config: self.cfg.clone(),
        }
    }

    /// Continues the run stored in `ckpt` from its step.
    pub fn resume(cfg: RunConfig, ckpt: &Path) -> Result<Self> {
        let data = cfg.dataset.load(Split::Train, cfg.seed)?;
        Self::resume_with_dataset(cfg, data, ckpt)
    }

    pub fn resume_with_dataset(cfg: RunConfig, data: Dataset, ckpt: &Path) -> Result<Self> {
        let mut tr = Self::with_dataset(cfg, data)?;
        let ck = Checkpoint::load(ckpt)?;
        tr.model.load_state(&ck)?;
        ck.restore_optimizer("optim/", tr.model.graph(), &mut tr.opt)?;
        let state: Tensor<f64> = ck.tensor("trainer/state")?;
        let s = state.data();
        if s.len() != 3 || s[0] as usize > tr.total_steps() {
            return Err(CoreError::Invalid(format!("{}: bad trainer state", ckpt.display())));
        }
        tr.step = s[0] as usize;
        tr.window_sum = s[1];
        tr.window_len = s[2] as usize;
        Ok(tr)
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.cfg.output_dir.join("checkpoints").join(format!("step_{:07}.ckpt", self.step))
    }

    /// Drops log lines past the current step; returns the last kept wall time.
    fn trim_metrics(&self, path: &Path) -> Result<f64> {
        if !path.exists() {
            return Ok(0.0);
        }
        let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
        let mut kept = String::new();
        let mut wall = 0.0;
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| CoreError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: MetricsRecord = serde_json::from_str(&line)?;
            if rec.step <= self.step {
                wall = rec.wall_time_s;
                kept.push_str(&line);
                kept.push('\n');
            }
        }
        fs::write(path, kept).map_err(|e| CoreError::io(path, e))?;
        Ok(wall)
    }

    /// Runs the remaining steps, writing metrics and checkpoints under the
    /// output directory. On a non-finite loss the run stops with an error;
    /// checkpoints already written stay in place.
    pub fn run(&mut self) -> Result<PretrainOutcome> {
        echo_config(&self.cfg)?;
        let out = self.cfg.output_dir.clone();
        let metrics_path = out.join(METRICS_FILE);
        let mut log = if self.step == 0 {
            MetricsLog::create(&metrics_path)?
        } else {
            self.wall_offset = self.trim_metrics(&metrics_path)?;
            MetricsLog::append_to(&metrics_path)?
        };
        let clock = Instant::now();
        let total = self.total_steps();
        let every = self.cfg.checkpoint_every();
        let mut checkpoints = Vec::new();
        let mut last_loss = f64::NAN;
        while self.step < total {
            let rep = self.step_once()?;
            last_loss = rep.loss;
            if rep.step % self.cfg.log_every == 0 || rep.step == total {
                let rec = MetricsRecord {
                    step: rep.step,
                    lr: rep.lr,
                    train_loss: self.take_window(),
                    wall_time_s: self.wall_offset + clock.elapsed().as_secs_f64(),
                };
                log.write(&rec)?;
            }
            if rep.step % every == 0 || rep.step == total {
                let path = self.checkpoint_path();
                write_checkpoint(&path, &self.checkpoint(), &self.meta())?;
                checkpoints.push(path);
            }
        }
        let final_checkpoint = out.join(FINAL_CHECKPOINT);
        write_checkpoint(&final_checkpoint, &self.checkpoint(), &self.meta())?;
        Ok(PretrainOutcome { final_checkpoint, checkpoints, metrics: metrics_path, final_loss: last_loss })
    }
}

/// Full pretraining run from a config.
pub fn pretrain(cfg: RunConfig) -> Result<PretrainOutcome> {
    Trainer::new(cfg)?.run()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
