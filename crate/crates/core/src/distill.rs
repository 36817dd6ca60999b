//! Feature distillation: a student backbone with an affine head regresses
//! the frozen teacher's normalized representation under mean squared error.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ncsl_diffcore::{sgd_step, Checkpoint, DiffError, OptimizerState, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::datapipe::{augment_single_batch, build_schedule, Dataset, Split};
use crate::models::{build_student, Backbone, StudentModel};
use crate::rng::TAG_DISTILL;
use crate::trainer::{
    echo_config, load_backbone, read_meta, warmup_cosine_lr, write_checkpoint, CheckpointKind, CheckpointMeta, MetricsLog,
    MetricsRecord, FINAL_CHECKPOINT, METRICS_FILE,
};
use crate::{CoreError, Result};

pub const NORMALIZER_EPS: f64 = 1e-5;

/// Per-dimension running mean and variance of a stream of batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineNormalizer {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub initialized: bool,
}

impl OnlineNormalizer {
    pub fn new(dim: usize, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(CoreError::config("distill.normalizer_momentum", "must be in [0, 1)"));
        }
        Ok(Self { mean: vec![0.0; dim], var: vec![1.0; dim], momentum, eps: NORMALIZER_EPS, initialized: false })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Folds the batch statistics into the running ones (the first batch
    /// sets them), then normalizes the batch with the updated values.
    pub fn update(&mut self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        let d = self.dim();
        if batch.rank() != 2 || batch.shape()[1] != d || batch.shape()[0] < 2 {
            return Err(CoreError::Invalid(format!("normalizer needs a (B >= 2, {d}) batch, got {:?}", batch.shape())));
        }
        let b = batch.shape()[0] as f64;
        let mut mu = vec![0.0f64; d];
        for row in batch.data().chunks(d) {
            mu.iter_mut().zip(row).for_each(|(m, &v)| *m += v as f64);
        }
        mu.iter_mut().for_each(|m| *m /= b);
        let mut var = vec![0.0f64; d];
        for row in batch.data().chunks(d) {
            var.iter_mut().zip(row).zip(&mu).for_each(|((s, &v), m)| *s += (v as f64 - m).powi(2));
        }
        var.iter_mut().for_each(|s| *s /= b);
        if self.initialized {
            let m = self.momentum;
            self.mean.iter_mut().zip(&mu).for_each(|(a, x)| *a = m * *a + (1.0 - m) * x);
            self.var.iter_mut().zip(&var).for_each(|(a, x)| *a = m * *a + (1.0 - m) * x);
        } else {
            self.mean = mu;
            self.var = var;
            self.initialized = true;
        }
        self.apply(batch)
    }

    /// `(x - mean) / sqrt(var + eps)` with the current running values.
    pub fn apply(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        if !self.initialized {
            return Err(CoreError::Invalid("normalizer has seen no batch yet".into()));
        }
        let d = self.dim();
        if batch.rank() != 2 || batch.shape()[1] != d {
            return Err(CoreError::Invalid(format!("normalizer needs (B, {d}), got {:?}", batch.shape())));
        }
        let scale: Vec<f64> = self.var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut out = batch.clone();
        for row in out.data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&scale) {
                *v = ((*v as f64 - m) * s) as f32;
            }
        }
        Ok(out)
    }

    fn save(&self, ck: &mut Checkpoint) {
        let d = self.dim();
        ck.insert_tensor("normalizer/mean", &Tensor::<f64>::from_f64(&[d], &self.mean).expect("d values"));
        ck.insert_tensor("normalizer/var", &Tensor::<f64>::from_f64(&[d], &self.var).expect("d values"));
    }
}

/// Rebuilds a student from a distillation checkpoint and its sidecar.
pub fn load_student(path: &Path) -> Result<(StudentModel<f32>, CheckpointMeta)> {
    let meta = read_meta(path)?;
    let (Some(enc), Some(out)) = (meta.student.clone(), meta.head_dim) else {
        return Err(CoreError::Invalid(format!("{} is not a student checkpoint", path.display())));
    };
    let mut s = build_student::<f32>(&enc, meta.input, out, meta.config.seed)?;
    s.load_state(&Checkpoint::load(path)?)?;
    Ok((s, meta))
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Training-mode loss of the first and last step.
    pub first_loss: f64,
    pub final_loss: f64,
}

/// Distillation run state; the teacher is only read.
pub struct Distiller<'t> {
    cfg: RunConfig,
    teacher: &'t dyn Backbone,
    data: Dataset,
    student: StudentModel<f32>,
    opt: OptimizerState<f32>,
    norm: Option<OnlineNormalizer>,
    total: usize,
    step: usize,
}

impl<'t> Distiller<'t> {
    /// The student backbone is `cfg.distill.student`, or the run encoder.
    pub fn new(cfg: RunConfig, teacher: &'t dyn Backbone, data: Dataset) -> Result<Self> {
        cfg.validate()?;
        let input = cfg.input_shape(&data);
        if teacher.input_shape() != input {
            return Err(CoreError::Invalid(format!(
                "teacher expects {:?} inputs, the distillation views are {input:?}",
                teacher.input_shape()
            )));
        }
        let enc = cfg.distill.student.clone().unwrap_or_else(|| cfg.encoder.clone());
        let student = build_student::<f32>(&enc, input, teacher.repr_dim(), cfg.seed)?;
        let opt = OptimizerState::new(student.graph().params(), cfg.momentum, cfg.weight_decay);
        let norm = if cfg.distill.normalize {
            Some(OnlineNormalizer::new(teacher.repr_dim(), cfg.distill.normalizer_momentum)?)
        } else {
            None
        };
        let total = cfg.distill.total_steps.unwrap_or(cfg.ordering.total_steps);
        Ok(Self { cfg, teacher, data, student, opt, norm, total, step: 0 })
    }

    pub fn student(&self) -> &StudentModel<f32> {
        &self.student
    }

    pub fn student_mut(&mut self) -> &mut StudentModel<f32> {
        &mut self.student
    }

    pub fn normalizer(&self) -> Option<&OnlineNormalizer> {
        self.norm.as_ref()
    }

    fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            kind: CheckpointKind::Student,
            step: self.step,
            total_steps: self.total,
            input: self.student.input,
            student: Some(self.student.encoder.clone()),
            head_dim: Some(self.student.out_dim),
            config: self.cfg.clone(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.student.save_state(&mut ck);
        ck.put_optimizer("optim/", self.student.graph(), &self.opt);
        if let Some(n) = &self.norm {
            n.save(&mut ck);
        }
        ck
    }

    /// Runs every step, logging like pretraining.
    pub fn run(&mut self) -> Result<DistillOutcome> {
        echo_config(&self.cfg)?;
        let out = self.cfg.output_dir.clone();
        let metrics = out.join(METRICS_FILE);
        let mut log = MetricsLog::create(&metrics)?;
        let mut plan = self.cfg.ordering.clone();
        plan.total_steps = self.total;
        let schedule = build_schedule(&plan, self.data.len())?;
        let base_lr = self.cfg.base_lr();
        let warmup = self.cfg.warmup_steps(self.data.len()).min(self.total - 1);
        let clock = Instant::now();
        let (mut first, mut last) = (f64::NAN, f64::NAN);
        let (mut window, mut len) = (0.0, 0usize);
        while self.step < self.total {
            let t = self.step;
            let idx = schedule.next_batch(t)?;
            let x = augment_single_batch(&self.data, &idx, &self.cfg.augmentation, self.cfg.seed, TAG_DISTILL, t as u64)?;
            let raw = self.teacher.represent(&x)?;
            let target = match &mut self.norm {
                Some(n) => n.update(&raw)?,
                None => raw,
            };
            let lr = warmup_cosine_lr(t, warmup, self.total, base_lr)?;
            self.student.graph_mut().zero_grad();
            let loss = match self.student.forward(&x, &target) {
                Err(CoreError::Diff(DiffError::NonFinite { .. })) => return Err(CoreError::NonFiniteLoss { step: t }),
                other => other?,
            };
            self.student.backward()?;
            match sgd_step(self.student.graph_mut().params_mut(), &mut self.opt, lr) {
                Err(DiffError::NonFiniteGradient(_)) => return Err(CoreError::NonFiniteLoss { step: t }),
                other => other?,
            }
            self.step += 1;
            if t == 0 {
                first = loss;
            }
            last = loss;
            window += loss;
            len += 1;
            if self.step % self.cfg.log_every == 0 || self.step == self.total {
                log.write(&MetricsRecord { step: self.step, lr, train_loss: window / len as f64, wall_time_s: clock.elapsed().as_secs_f64() })?;
                window = 0.0;
                len = 0;
            }
        }
        let final_checkpoint = out.join(FINAL_CHECKPOINT);
        write_checkpoint(&final_checkpoint, &self.checkpoint(), &self.meta())?;
        Ok(DistillOutcome { final_checkpoint, metrics, first_loss: first, final_loss: last })
    }
}

/// Distills the backbone stored at `teacher` into a fresh student.
pub fn distill(cfg: RunConfig, teacher: &Path) -> Result<DistillOutcome> {
    let (t, _) = load_backbone(teacher)?;
    let data = cfg.dataset.load(Split::Train, cfg.seed)?;
    Distiller::new(cfg, t.as_ref(), data)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn batch(rows: &[&[f32]]) -> Tensor<f32> {
        let d = rows[0].len();
        Tensor::new(vec![rows.len(), d], rows.concat()).unwrap()
    }

    #[test]
    fn ema_arithmetic() {
        let mut n = OnlineNormalizer::new(1, 0.9).unwrap();
        n.update(&batch(&[&[0.0], &[0.0]])).unwrap();
        assert_eq!(n.mean, vec![0.0]);
        n.update(&batch(&[&[1.0], &[1.0]])).unwrap();
        assert!((n.mean[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn constant_stream_normalizes_to_zero() {
        let mut n = OnlineNormalizer::new(3, 0.9).unwrap();
        let row: &[f32] = &[2.0, -1.0, 5.0];
        let c = batch(&[row; 4]);
        let out = n.update(&c).unwrap();
        assert!(out.data().iter().all(|v| v.abs() < 1e-6));
        assert!(n.apply(&c).unwrap().data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn running_stats_converge_on_standard_normal_stream() {
        let mut n = OnlineNormalizer::new(16, 0.9).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let v: Vec<f32> = (0..64 * 16).map(|_| StandardNormal.sample(&mut rng)).collect();
            n.update(&Tensor::new(vec![64, 16], v).unwrap()).unwrap();
        }
        assert!(n.mean.iter().all(|m| m.abs() < 0.1), "{:?}", n.mean);
        assert!(n.var.iter().all(|v| (v - 1.0).abs() < 0.1), "{:?}", n.var);
    }

    #[test]
    fn malformed_input() {
        let mut n = OnlineNormalizer::new(2, 0.5).unwrap();
        assert!(n.apply(&batch(&[&[1.0, 2.0]])).is_err());
        assert!(n.update(&batch(&[&[1.0, 2.0]])).is_err());
        assert!(n.update(&batch(&[&[1.0], &[2.0]])).is_err());
        assert!(OnlineNormalizer::new(2, 1.0).is_err());
    }
}
