//! Fixed-capacity FIFO support set for nearest-neighbour positives.

use ncsl_diffcore::{Scalar, Tensor};

use crate::{CoreError, Result};

pub const DEFAULT_CAPACITY: usize = 2048;

/// Ring buffer of unit-norm vectors. Once full, each push overwrites the
/// oldest slot.
#[derive(Clone, Debug, PartialEq)]
pub struct NNQueue<T> {
    capacity: usize,
    dim: usize,
    storage: Vec<T>,
    fill: usize,
    next: usize,
}

fn unit<T: Scalar>(v: &[T]) -> Option<Vec<T>> {
    let norm = v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    (norm > 1e-12 && norm.is_finite()).then(|| v.iter().map(|&x| T::of(x.as_f64() / norm)).collect())
}

impl<T: Scalar> NNQueue<T> {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(CoreError::config("queue", "capacity and dimension must be positive"));
        }
        Ok(Self {
            capacity,
            dim,
            storage: vec![T::zero(); capacity * dim],
            fill: 0,
            next: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.fill
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    pub fn is_full(&self) -> bool {
        self.fill == self.capacity
    }

    /// Slot `i` in storage order.
    pub fn slot(&self, i: usize) -> &[T] {
        &self.storage[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, v: &[T]) -> Result<()> {
        if v.len() != self.dim {
            return Err(CoreError::Invalid(format!(
                "queue holds {}-dimensional vectors, got {}",
                self.dim,
                v.len()
            )));
        }
        let u = unit(v).ok_or_else(|| CoreError::ZeroNorm {
            what: "queue push".into(),
            row: 0,
        })?;
        let at = self.next * self.dim;
        self.storage[at..at + self.dim].copy_from_slice(&u);
        self.next = (self.next + 1) % self.capacity;
        self.fill = (self.fill + 1).min(self.capacity);
        Ok(())
    }

    /// Pushes every row of a `(B, dim)` tensor in order.
    pub fn push_rows(&mut self, rows: &Tensor<T>) -> Result<()> {
        for r in rows.data().chunks(self.dim) {
            self.push(r)?;
        }
        Ok(())
    }

    /// Stored vector with the highest cosine similarity to `v`; ties go to the
    /// lowest slot.
    pub fn lookup(&self, v: &[T]) -> Result<&[T]> {
        if self.fill == 0 {
            return Err(CoreError::Invalid("lookup in an empty queue".into()));
        }
        if v.len() != self.dim {
            return Err(CoreError::Invalid(format!(
                "queue holds {}-dimensional vectors, got {}",
                self.dim,
                v.len()
            )));
        }
        // stored rows are unit norm, so the dot product ranks like cosine
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for i in 0..self.fill {
            let s: f64 = self.slot(i).iter().zip(v).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
            if s > best_sim {
                best_sim = s;
                best = i;
            }
        }
        Ok(self.slot(best))
    }

    /// Row-wise [`NNQueue::lookup`] over a `(B, dim)` tensor.
    pub fn lookup_rows(&self, rows: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = Vec::with_capacity(rows.len());
        for r in rows.data().chunks(self.dim) {
            out.extend_from_slice(self.lookup(r)?);
        }
        Ok(Tensor::new(rows.shape().to_vec(), out)?)
    }

    /// `(storage, fill, next)` for checkpointing.
    pub fn state(&self) -> (Tensor<T>, usize, usize) {
        let t = Tensor::new(vec![self.capacity, self.dim], self.storage.clone()).expect("queue shape");
        (t, self.fill, self.next)
    }

    pub fn restore(&mut self, storage: &Tensor<T>, fill: usize, next: usize) -> Result<()> {
        if storage.shape() != [self.capacity, self.dim] || fill > self.capacity || next >= self.capacity {
            return Err(CoreError::Invalid(format!(
                "queue state {:?} (fill {fill}, next {next}) does not fit capacity {} x {}",
                storage.shape(),
                self.capacity,
                self.dim
            )));
        }
        self.storage = storage.data().to_vec();
        self.fill = fill;
        self.next = next;
        Ok(())
    }
}
