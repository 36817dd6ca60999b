//! SGD with momentum, learning-rate schedules and EMA parameter updates.

use crate::error::{DiffError, Result};
use crate::graph::{Graph, ParamId, Parameter, StatsId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Momentum buffers aligned by position with a parameter list.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffers: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[Parameter<T>], momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }
}

/// `buf <- mu * buf + (grad + wd * value); value <- value - lr * buf` for
/// every parameter that requires a gradient. Nothing is modified when any
/// gradient is non-finite.
pub fn sgd_step<T: Scalar>(params: &mut [Parameter<T>], state: &mut OptimizerState<T>, lr: f64) -> Result<()> {
    if state.buffers.len() != params.len() {
        return Err(DiffError::ParamMismatch(format!(
            "{} momentum buffers for {} parameters",
            state.buffers.len(),
            params.len()
        )));
    }
    for (p, buf) in params.iter().zip(&state.buffers) {
        if buf.shape() != p.value.shape() {
            return Err(DiffError::ParamMismatch(format!(
                "momentum buffer {:?} for `{}` {:?}",
                buf.shape(),
                p.name,
                p.value.shape()
            )));
        }
        if p.requires_grad && !p.grad.is_finite() {
            return Err(DiffError::NonFiniteGradient(p.name.clone()));
        }
    }
    let (mu, wd, lr) = (T::of(state.momentum), T::of(state.weight_decay), T::of(lr));
    for (p, buf) in params.iter_mut().zip(state.buffers.iter_mut()) {
        if !p.requires_grad {
            continue;
        }
        let grads = p.grad.data();
        let values = p.value.data_mut();
        for ((v, b), &g) in values.iter_mut().zip(buf.data_mut()).zip(grads) {
            *b = mu * *b + (g + wd * *v);
            *v = *v - lr * *b;
        }
    }
    Ok(())
}

/// `base_lr * 0.5 * (1 + cos(pi * step / total_steps))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(DiffError::StepOutOfRange { step, total: total_steps });
    }
    let progress = step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

fn blend<T: Scalar>(target: &mut Tensor<T>, online: &Tensor<T>, tau: f64) {
    if tau == 0.0 {
        target.data_mut().copy_from_slice(online.data());
        return;
    }
    if tau == 1.0 {
        return;
    }
    let (keep, take) = (T::of(tau), T::one() - T::of(tau));
    for (t, &o) in target.data_mut().iter_mut().zip(online.data()) {
        let (lo, hi) = if *t <= o { (*t, o) } else { (o, *t) };
        // Rounding can leave the convex combination one ulp outside its endpoints.
        *t = (keep * *t + take * o).max(lo).min(hi);
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if (0.0..=1.0).contains(&tau) {
        Ok(())
    } else {
        Err(DiffError::InvalidArgument(format!("EMA tau {tau} outside [0, 1]")))
    }
}

/// `target <- tau * target + (1 - tau) * online`, elementwise, aligned by position.
pub fn ema_update<T: Scalar>(target: &mut [Parameter<T>], online: &[Parameter<T>], tau: f64) -> Result<()> {
    check_tau(tau)?;
    if target.len() != online.len() {
        return Err(DiffError::ParamMismatch(format!(
            "{} target parameters for {} online parameters",
            target.len(),
            online.len()
        )));
    }
    for (t, o) in target.iter().zip(online) {
        if t.value.shape() != o.value.shape() {
            return Err(DiffError::ParamMismatch(format!(
                "`{}` {:?} vs `{}` {:?}",
                t.name,
                t.value.shape(),
                o.name,
                o.value.shape()
            )));
        }
    }
    for (t, o) in target.iter_mut().zip(online) {
        blend(&mut t.value, &o.value, tau);
    }
    Ok(())
}

/// EMA update between parameter pairs `(target, online)` living in one
/// graph, plus a copy of batch-norm running statistics `(target, online)`.
pub fn ema_update_in_graph<T: Scalar>(
    graph: &mut Graph<T>,
    params: &[(ParamId, ParamId)],
    stats: &[(StatsId, StatsId)],
    tau: f64,
) -> Result<()> {
    check_tau(tau)?;
    for &(t, o) in params {
        let online = graph.param(o).value.clone();
        let target = &mut graph.param_mut(t).value;
        if target.shape() != online.shape() {
            return Err(DiffError::ParamMismatch(format!(
                "EMA pair shapes {:?} vs {:?}",
                target.shape(),
                online.shape()
            )));
        }
        blend(target, &online, tau);
    }
    for &(t, o) in stats {
        let online = graph.stats()[o.0].clone();
        let target = &mut graph.stats_mut()[t.0];
        target.mean = online.mean;
        target.var = online.var;
    }
    Ok(())
}
