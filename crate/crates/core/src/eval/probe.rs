//! Linear probe: a softmax classifier trained on frozen backbone features.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use ncsl_diffcore::cosine_lr;

use crate::config::ProbeConfig;
use crate::datapipe::{augment_single_batch, eval_batch, AugmentationConfig, Dataset, Normalize};
use crate::models::Backbone;
use crate::rng::{stream, TAG_PROBE};
use crate::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Top-1 accuracy on the validation set.
    pub accuracy: f64,
    pub epochs: usize,
    pub steps: usize,
    pub lr: f64,
    pub final_loss: f64,
    pub backbone_checksum: u64,
}

/// Affine classifier `logits = W f + b`, with momentum buffers.
struct Head {
    d: usize,
    classes: usize,
    w: Vec<f64>,
    b: Vec<f64>,
    vw: Vec<f64>,
    vb: Vec<f64>,
}

impl Head {
    fn new(d: usize, classes: usize) -> Self {
        Self { d, classes, w: vec![0.0; d * classes], b: vec![0.0; classes], vw: vec![0.0; d * classes], vb: vec![0.0; classes] }
    }

    fn logits(&self, f: &[f32]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                let w = &self.w[c * self.d..(c + 1) * self.d];
                self.b[c] + w.iter().zip(f).map(|(a, &x)| a * x as f64).sum::<f64>()
            })
            .collect()
    }

    /// One SGD step on mean cross-entropy; returns the batch loss.
    fn step(&mut self, feats: &[f32], labels: &[u32], lr: f64, cfg: &ProbeConfig) -> f64 {
        let (d, k) = (self.d, self.classes);
        let bsz = labels.len() as f64;
        let mut gw = vec![0.0; d * k];
        let mut gb = vec![0.0; k];
        let mut loss = 0.0;
        for (f, &y) in feats.chunks(d).zip(labels) {
            let z = self.logits(f);
            let top = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - top).exp()).collect();
            let sum: f64 = e.iter().sum();
            loss += sum.ln() + top - z[y as usize];
            for c in 0..k {
                let g = (e[c] / sum - f64::from(c == y as usize)) / bsz;
                gb[c] += g;
                gw[c * d..(c + 1) * d].iter_mut().zip(f).for_each(|(a, &x)| *a += g * x as f64);
            }
        }
        let (mu, wd) = (cfg.momentum, cfg.weight_decay);
        for ((w, v), g) in self.w.iter_mut().zip(&mut self.vw).zip(&gw) {
            *v = mu * *v + g + wd * *w;
            *w -= lr * *v;
        }
        for ((b, v), g) in self.b.iter_mut().zip(&mut self.vb).zip(&gb) {
            *v = mu * *v + g;
            *b -= lr * *v;
        }
        loss / bsz
    }

    fn predict(&self, f: &[f32]) -> u32 {
        let z = self.logits(f);
        let mut best = 0;
        for c in 1..z.len() {
            if z[c] > z[best] {
                best = c;
            }
        }
        best as u32
    }
}

/// Trains a linear classifier on features of augmented training views
/// (random resized crop and flip) and reports validation top-1 accuracy.
/// The backbone is only read; its checksum is verified afterwards.
pub fn linear_probe(
    backbone: &dyn Backbone,
    train: &Dataset,
    val: &Dataset,
    cfg: &ProbeConfig,
    (resize, crop): (usize, usize),
    norm: &Normalize,
    seed: u64,
) -> Result<ProbeResult> {
    if train.is_empty() || val.is_empty() {
        return Err(CoreError::Dataset("probe needs non-empty train and validation sets".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(CoreError::config("eval.probe", "epochs and batch_size must be positive"));
    }
    let classes = train.num_classes.max(val.num_classes);
    let before = backbone.checksum();
    let d = backbone.repr_dim();
    let mut aug = AugmentationConfig::probe(norm.clone());
    aug.out_size = Some(crop);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let lr0 = cfg.lr();
    let mut head = Head::new(d, classes);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream(seed, &[TAG_PROBE, epoch as u64]));
        for idx in order.chunks(cfg.batch_size) {
            let x = augment_single_batch(train, idx, &aug, seed, TAG_PROBE, step as u64)?;
            let f = backbone.represent(&x)?;
            let labels: Vec<u32> = idx.iter().map(|&i| train.labels[i]).collect();
            final_loss = head.step(f.data(), &labels, cosine_lr(step, total, lr0)?, cfg);
            if !final_loss.is_finite() {
                return Err(CoreError::NonFiniteLoss { step });
            }
            step += 1;
        }
    }
    let all: Vec<usize> = (0..val.len()).collect();
    let mut hits = 0usize;
    for idx in all.chunks(cfg.batch_size.max(64)) {
        let f = backbone.represent(&eval_batch(val, idx, resize, crop, norm)?)?;
        hits += f.data().chunks(d).zip(idx).filter(|(row, &i)| head.predict(row) == val.labels[i]).count();
    }
    let after = backbone.checksum();
    if before != after {
        return Err(CoreError::Invalid("backbone changed during probing".into()));
    }
    Ok(ProbeResult { accuracy: hits as f64 / val.len() as f64, epochs: cfg.epochs, steps: total, lr: lr0, final_loss, backbone_checksum: after })
}
