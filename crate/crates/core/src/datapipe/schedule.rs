//! Data-ordering schedules: which images may be sampled at each step.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::{stream, TAG_EPOCH, TAG_PARTITION};
use crate::{CoreError, Result};

pub const DEFAULT_CHUNKS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingMode {
    MultiplePass,
    SinglePass,
    Cumulative,
    Hybrid,
}

impl OrderingMode {
    pub fn name(self) -> &'static str {
        match self {
            OrderingMode::MultiplePass => "multiple_pass",
            OrderingMode::SinglePass => "single_pass",
            OrderingMode::Cumulative => "cumulative",
            OrderingMode::Hybrid => "hybrid",
        }
    }

    fn chunked(self) -> bool {
        self != OrderingMode::MultiplePass
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderingPlan {
    pub mode: OrderingMode,
    pub total_steps: usize,
    pub batch_size: usize,
    #[serde(default = "default_chunks")]
    pub num_chunks: usize,
    /// Hybrid only: number of single-pass chunks before the full-set phase.
    #[serde(default)]
    pub switch_chunk: Option<usize>,
    /// Filled from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

fn default_chunks() -> usize {
    DEFAULT_CHUNKS
}

impl OrderingPlan {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.total_steps == 0 {
            return Err(CoreError::config("ordering.total_steps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(CoreError::config("ordering.batch_size", "must be positive"));
        }
        if n == 0 {
            return Err(CoreError::config("ordering", "dataset is empty"));
        }
        if self.mode.chunked() {
            let c = self.num_chunks;
            if c == 0 || c > n {
                return Err(CoreError::config("ordering.num_chunks", format!("must be in 1..={n}, got {c}")));
            }
            if self.total_steps % c != 0 {
                return Err(CoreError::config(
                    "ordering.total_steps",
                    format!("{} steps do not divide into {c} chunks", self.total_steps),
                ));
            }
        }
        match (self.mode, self.switch_chunk) {
            (OrderingMode::Hybrid, Some(k)) if k >= 1 && k < self.num_chunks => Ok(()),
            (OrderingMode::Hybrid, k) => Err(CoreError::config(
                "ordering.switch_chunk",
                format!("hybrid needs 1 <= switch_chunk < {}, got {k:?}", self.num_chunks),
            )),
            (_, Some(_)) => Err(CoreError::config("ordering.switch_chunk", "only valid for hybrid")),
            _ => Ok(()),
        }
    }
}

/// Eligible set of one phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Eligible {
    All,
    Chunk(usize),
    /// Chunks `0..=j`.
    Prefix(usize),
}

/// Maximal step range with one eligible set. Sampling restarts its local
/// epochs at each phase start.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Phase {
    pub id: usize,
    pub start: usize,
    pub eligible: Eligible,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChunkSchedule {
    pub plan: OrderingPlan,
    pub n: usize,
    /// Random partition of `[0, n)`; empty for multiple_pass.
    pub chunks: Vec<Vec<usize>>,
    pub steps_per_chunk: usize,
}

pub fn build_schedule(plan: &OrderingPlan, n: usize) -> Result<ChunkSchedule> {
    plan.validate(n)?;
    let (chunks, steps_per_chunk) = if plan.mode.chunked() {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut stream(plan.seed, &[TAG_PARTITION]));
        let c = plan.num_chunks;
        let (base, extra) = (n / c, n % c);
        let mut chunks = Vec::with_capacity(c);
        let mut at = 0;
        for j in 0..c {
            let len = base + usize::from(j < extra);
            chunks.push(perm[at..at + len].to_vec());
            at += len;
        }
        (chunks, plan.total_steps / c)
    } else {
        (Vec::new(), plan.total_steps)
    };
    Ok(ChunkSchedule {
        plan: plan.clone(),
        n,
        chunks,
        steps_per_chunk,
    })
}

impl ChunkSchedule {
    pub fn phase(&self, step: usize) -> Result<Phase> {
        if step >= self.plan.total_steps {
            return Err(CoreError::Invalid(format!("step {step} outside [0, {})", self.plan.total_steps)));
        }
        let s = self.steps_per_chunk;
        let j = step / s;
        Ok(match self.plan.mode {
            OrderingMode::MultiplePass => Phase { id: 0, start: 0, eligible: Eligible::All },
            OrderingMode::SinglePass => Phase { id: j, start: j * s, eligible: Eligible::Chunk(j) },
            OrderingMode::Cumulative => Phase { id: j, start: j * s, eligible: Eligible::Prefix(j) },
            OrderingMode::Hybrid => {
                let k = self.plan.switch_chunk.expect("validated hybrid plan");
                if j < k {
                    Phase { id: j, start: j * s, eligible: Eligible::Chunk(j) }
                } else {
                    Phase { id: k, start: k * s, eligible: Eligible::All }
                }
            }
        })
    }

    pub fn indices(&self, e: Eligible) -> Vec<usize> {
        match e {
            Eligible::All => (0..self.n).collect(),
            Eligible::Chunk(j) => self.chunks[j].clone(),
            Eligible::Prefix(j) => self.chunks[..=j].concat(),
        }
    }

    pub fn eligible_at(&self, step: usize) -> Result<Vec<usize>> {
        Ok(self.indices(self.phase(step)?.eligible))
    }

    /// The `batch_size` indices of `step`. Within a phase the eligible set is
    /// consumed in shuffled local epochs, wrapping into the next epoch when
    /// a batch crosses an epoch boundary.
    pub fn next_batch(&self, step: usize) -> Result<Vec<usize>> {
        let phase = self.phase(step)?;
        let pool = self.indices(phase.eligible);
        if pool.is_empty() {
            return Err(CoreError::Invalid(format!("internal: empty eligible set at step {step}")));
        }
        let m = pool.len();
        let b = self.plan.batch_size;
        let first = (step - phase.start) * b;
        let mut out = Vec::with_capacity(b);
        let mut epoch = usize::MAX;
        let mut perm = Vec::new();
        for q in first..first + b {
            if q / m != epoch {
                epoch = q / m;
                perm = pool.clone();
                perm.shuffle(&mut stream(self.plan.seed, &[TAG_EPOCH, phase.id as u64, epoch as u64]));
            }
            out.push(perm[q % m]);
        }
        Ok(out)
    }
}
