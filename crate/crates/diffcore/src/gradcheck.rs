//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DiffError, Result};
use crate::graph::{ExternalHook, Graph, Inputs, Mode, NodeId, Op};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Above this many trainable coordinates a random subsample is checked.
    pub max_coords: usize,
    pub seed: u64,
    /// Floor of the relative-error denominator. Coordinates whose true
    /// gradient is zero only carry roundoff (about 1e-11 for `eps = 1e-5`),
    /// which must not count as a relative error of 1.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords: 10_000,
            seed: 0,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max |a - n| / max(abs_floor, |a| + |n|)` over the checked coordinates.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
    /// Largest analytic gradient magnitude seen, useful to spot all-zero checks.
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
    /// Coordinates left out because the loss is not smooth within `eps` of
    /// the current point (a ReLU or max-pool switch): central differences at
    /// `eps` and `eps / 2` disagree, so neither estimates the derivative.
    pub kinks_skipped: usize,
}

fn loss_at(
    graph: &mut Graph<f64>,
    inputs: &Inputs<'_, f64>,
    loss: NodeId,
    hook: &mut ExternalHook<'_, f64>,
    pins: &[(NodeId, Tensor<f64>)],
) -> Result<f64> {
    let out = graph.evaluate_pinned(inputs, &[loss], Mode::Train, hook, pins)?;
    out[0].item().ok_or_else(|| DiffError::NotScalar {
        node: format!("#{}", loss.0),
        shape: out[0].shape().to_vec(),
    })
}

/// Compares the analytic gradient of `loss` (training mode) with central
/// differences for every trainable coordinate. Parameter values and
/// batch-norm statistics are restored afterwards; parameter gradients hold the
/// analytic values. Stop-gradient and external nodes are held at their
/// unperturbed values while differencing.
pub fn grad_check(
    graph: &mut Graph<f64>,
    inputs: &Inputs<'_, f64>,
    loss: NodeId,
    opts: &GradCheckOptions,
    hook: &mut ExternalHook<'_, f64>,
) -> Result<GradCheck> {
    if opts.eps <= 0.0 {
        return Err(DiffError::InvalidArgument(format!("eps must be positive, got {}", opts.eps)));
    }
    let saved_stats: Vec<(Tensor<f64>, Tensor<f64>)> =
        graph.stats().iter().map(|s| (s.mean.clone(), s.var.clone())).collect();

    graph.zero_grad();
    loss_at(graph, inputs, loss, hook, &[])?;
    graph.backward(loss)?;
    // Stop-gradient and external values are constants of the differentiated
    // function, so they stay at their unperturbed values.
    let pins: Vec<(NodeId, Tensor<f64>)> = graph
        .nodes()
        .iter()
        .enumerate()
        .filter(|(_, n)| matches!(n.op, Op::StopGrad | Op::External(_)))
        .filter_map(|(i, _)| graph.cached_value(NodeId(i)).map(|v| (NodeId(i), v.clone())))
        .collect();
    let analytic: Vec<Tensor<f64>> = graph.params().iter().map(|p| p.grad.clone()).collect();

    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (pi, p) in graph.params().iter().enumerate() {
        if p.requires_grad {
            coords.extend((0..p.value.len()).map(|j| (pi, j)));
        }
    }
    if coords.len() > opts.max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let picked = sample(&mut rng, coords.len(), opts.max_coords);
        let mut idx: Vec<usize> = picked.into_iter().collect();
        idx.sort_unstable();
        coords = idx.into_iter().map(|i| coords[i]).collect();
    }

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: coords.len(),
        max_abs_analytic: 0.0,
        max_abs_numeric: 0.0,
        kinks_skipped: 0,
    };
    let rel = |a: f64, b: f64| (a - b).abs() / (a.abs() + b.abs()).max(opts.abs_floor);
    for &(pi, j) in &coords {
        let name = graph.params()[pi].name.clone();
        let mut central = |graph: &mut Graph<f64>, eps: f64| -> Result<f64> {
            let original = graph.params()[pi].value.data()[j];
            graph.params_mut()[pi].value.data_mut()[j] = original + eps;
            let plus = loss_at(graph, inputs, loss, hook, &pins);
            graph.params_mut()[pi].value.data_mut()[j] = original - eps;
            let minus = loss_at(graph, inputs, loss, hook, &pins);
            graph.params_mut()[pi].value.data_mut()[j] = original;
            let numeric = (plus? - minus?) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(DiffError::NonFinite { node: format!("gradient of `{name}`[{j}]") });
            }
            Ok(numeric)
        };
        let numeric = central(graph, opts.eps)?;
        let a = analytic[pi].data()[j];
        if !a.is_finite() {
            return Err(DiffError::NonFinite { node: format!("gradient of `{name}`[{j}]") });
        }
        let err = rel(a, numeric);
        if err > 1e-6 {
            let half = central(graph, opts.eps / 2.0)?;
            if rel(numeric, half) > 1e-3 {
                report.kinks_skipped += 1;
                continue;
            }
        }
        report.max_abs_analytic = report.max_abs_analytic.max(a.abs());
        report.max_abs_numeric = report.max_abs_numeric.max(numeric.abs());
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some((name, j));
        }
    }

    for (s, (m, v)) in graph.stats_mut().iter_mut().zip(saved_stats) {
        s.mean = m;
        s.var = v;
    }
    for (p, g) in graph.params_mut().iter_mut().zip(analytic) {
        p.grad = g;
    }
    Ok(report)
}

/// [`grad_check`] for graphs without external nodes.
pub fn grad_check_plain(
    graph: &mut Graph<f64>,
    inputs: &Inputs<'_, f64>,
    loss: NodeId,
    opts: &GradCheckOptions,
) -> Result<GradCheck> {
    grad_check(graph, inputs, loss, opts, &mut |key: &str, _: &[&Tensor<f64>]| {
        Err(DiffError::InvalidArgument(format!("no hook bound for external node `{key}`")))
    })
}
