//! Encoders, projection/prediction heads and the three Siamese objectives.

use ncsl_diffcore::checkpoint::TensorData;
use ncsl_diffcore::init::{he_uniform, ones, zeros};
use ncsl_diffcore::optim::ema_update_in_graph;
use ncsl_diffcore::{Checkpoint, Graph, Mode, NodeId, ParamId, Scalar, StatsId, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::queue::{NNQueue, DEFAULT_CAPACITY};
use crate::rng::{stream, TAG_INIT};
use crate::{CoreError, Result};

pub const DEFAULT_TAU: f64 = 0.996;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Mlp,
    Conv,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    #[default]
    Basic,
    Bottleneck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Simsiam,
    Byol,
    Nnsiam,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Simsiam => "simsiam",
            Variant::Byol => "byol",
            Variant::Nnsiam => "nnsiam",
        }
    }
}

/// Backbone shape. `depth` counts residual blocks (conv) or hidden layers
/// (mlp); channel and hidden widths scale with `width_multiplier`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub depth: usize,
    pub width_multiplier: f64,
    pub repr_dim: usize,
    #[serde(default)]
    pub block: BlockKind,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Conv,
            depth: 4,
            width_multiplier: 1.0,
            repr_dim: 128,
            block: BlockKind::Basic,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(CoreError::config("encoder.depth", "must be at least 1"));
        }
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(CoreError::config("encoder.width_multiplier", "must be positive"));
        }
        if self.repr_dim < 8 {
            return Err(CoreError::config("encoder.repr_dim", "must be at least 8"));
        }
        Ok(())
    }

    /// Base channel count of the stem and first block.
    pub fn base_channels(&self) -> usize {
        ((32.0 * self.width_multiplier).round() as usize).max(1)
    }

    /// Hidden width of the mlp kind.
    pub fn hidden_width(&self) -> usize {
        ((256.0 * self.width_multiplier).round() as usize).max(1)
    }

    /// Nominal width of conv block `i`: 32w, 64w, 128w, 128w, ...
    pub fn nominal_channels(&self, i: usize) -> usize {
        self.base_channels() << i.min(2)
    }

    pub fn block_stride(i: usize) -> usize {
        if (1..=3).contains(&i) {
            2
        } else {
            1
        }
    }
}

/// Head widths. Unset fields resolve to the defaults for the encoder's
/// `repr_dim`: projector `[d, d, d]`, predictor bottleneck `d / 4`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    #[serde(default)]
    pub projector: Option<Vec<usize>>,
    #[serde(default)]
    pub predictor_bottleneck: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedHeads {
    pub projector: Vec<usize>,
    pub bottleneck: usize,
}

impl ResolvedHeads {
    pub fn proj_dim(&self) -> usize {
        *self.projector.last().expect("non-empty projector")
    }
}

impl HeadConfig {
    pub fn resolve(&self, repr_dim: usize) -> Result<ResolvedHeads> {
        let projector = self.projector.clone().unwrap_or_else(|| vec![repr_dim; 3]);
        if projector.is_empty() || projector.contains(&0) {
            return Err(CoreError::config("heads.projector", "needs at least one positive width"));
        }
        let proj_dim = *projector.last().unwrap();
        let bottleneck = self.predictor_bottleneck.unwrap_or((repr_dim / 4).max(1));
        if bottleneck == 0 || bottleneck >= proj_dim {
            return Err(CoreError::config(
                "heads.predictor_bottleneck",
                format!("must be in 1..{proj_dim}, got {bottleneck}"),
            ));
        }
        Ok(ResolvedHeads { projector, bottleneck })
    }
}

/// Per-image input layout `(channels, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOptions {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_capacity")]
    pub queue_capacity: usize,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

fn default_capacity() -> usize {
    DEFAULT_CAPACITY
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            queue_capacity: DEFAULT_CAPACITY,
        }
    }
}

// ---- layer plans --------------------------------------------------------

#[derive(Clone, Debug)]
enum Layer {
    Conv { w: ParamId, stride: usize, pad: usize },
    Affine { w: ParamId, b: Option<ParamId> },
    Bn { gamma: ParamId, beta: ParamId, stats: StatsId },
    Relu,
    GlobalPool,
    Flatten,
    Residual { main: Vec<Layer>, shortcut: Vec<Layer> },
}

fn apply<T: Scalar>(g: &mut Graph<T>, layers: &[Layer], mut x: NodeId) -> NodeId {
    for l in layers {
        x = match l {
            Layer::Conv { w, stride, pad } => g.conv2d(x, *w, *stride, *pad),
            Layer::Affine { w, b } => g.affine(x, *w, *b),
            Layer::Bn { gamma, beta, stats } => g.batch_norm(x, *gamma, *beta, *stats),
            Layer::Relu => g.relu(x),
            Layer::GlobalPool => g.global_avg_pool(x),
            Layer::Flatten => g.flatten(x),
            Layer::Residual { main, shortcut } => {
                let a = apply(g, main, x);
                let s = apply(g, shortcut, x);
                let sum = g.add(a, s);
                g.relu(sum)
            }
        };
    }
    x
}

struct Builder<'a, T> {
    g: &'a mut Graph<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: &'a str,
    trainable: bool,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Layer {
        let w = he_uniform(&[cout, cin, k, k], cin * k * k, self.rng);
        let w = self.g.add_param(format!("{}{name}.w", self.prefix), w, self.trainable);
        Layer::Conv { w, stride, pad: k / 2 }
    }

    fn affine(&mut self, name: &str, i: usize, o: usize, bias: bool) -> Layer {
        let w = he_uniform(&[o, i], i, self.rng);
        let w = self.g.add_param(format!("{}{name}.w", self.prefix), w, self.trainable);
        let b = bias.then(|| self.g.add_param(format!("{}{name}.b", self.prefix), zeros(&[o]), self.trainable));
        Layer::Affine { w, b }
    }

    fn bn(&mut self, name: &str, c: usize) -> Layer {
        let gamma = self.g.add_param(format!("{}{name}.gamma", self.prefix), ones(&[c]), self.trainable);
        let beta = self.g.add_param(format!("{}{name}.beta", self.prefix), zeros(&[c]), self.trainable);
        let stats = self.g.add_stats(format!("{}{name}", self.prefix), c);
        Layer::Bn { gamma, beta, stats }
    }

    fn encoder(&mut self, enc: &EncoderConfig, input: InputShape) -> Vec<Layer> {
        match enc.kind {
            EncoderKind::Mlp => {
                let h = enc.hidden_width();
                let mut layers = vec![Layer::Flatten];
                let mut prev = input.numel();
                for i in 0..enc.depth {
                    layers.push(self.affine(&format!("enc.fc{i}"), prev, h, false));
                    layers.push(self.bn(&format!("enc.bn{i}"), h));
                    layers.push(Layer::Relu);
                    prev = h;
                }
                layers.push(self.affine("enc.out", prev, enc.repr_dim, false));
                layers.push(self.bn("enc.out_bn", enc.repr_dim));
                layers.push(Layer::Relu);
                layers
            }
            EncoderKind::Conv => {
                let c0 = enc.base_channels();
                let mut layers = vec![self.conv("enc.stem", input.channels, c0, 3, 1), self.bn("enc.stem_bn", c0), Layer::Relu];
                let mut prev = c0;
                for i in 0..enc.depth {
                    let last = i + 1 == enc.depth;
                    let stride = EncoderConfig::block_stride(i);
                    let nominal = enc.nominal_channels(i);
                    let p = format!("enc.b{i}");
                    let (main, out) = match enc.block {
                        BlockKind::Basic => {
                            let out = if last { enc.repr_dim } else { nominal };
                            let main = vec![
                                self.conv(&format!("{p}.conv1"), prev, out, 3, stride),
                                self.bn(&format!("{p}.bn1"), out),
                                Layer::Relu,
                                self.conv(&format!("{p}.conv2"), out, out, 3, 1),
                                self.bn(&format!("{p}.bn2"), out),
                            ];
                            (main, out)
                        }
                        BlockKind::Bottleneck => {
                            let out = if last { enc.repr_dim } else { 4 * nominal };
                            let main = vec![
                                self.conv(&format!("{p}.conv1"), prev, nominal, 1, 1),
                                self.bn(&format!("{p}.bn1"), nominal),
                                Layer::Relu,
                                self.conv(&format!("{p}.conv2"), nominal, nominal, 3, stride),
                                self.bn(&format!("{p}.bn2"), nominal),
                                Layer::Relu,
                                self.conv(&format!("{p}.conv3"), nominal, out, 1, 1),
                                self.bn(&format!("{p}.bn3"), out),
                            ];
                            (main, out)
                        }
                    };
                    let shortcut = if stride != 1 || prev != out {
                        vec![self.conv(&format!("{p}.short"), prev, out, 1, stride), self.bn(&format!("{p}.short_bn"), out)]
                    } else {
                        Vec::new()
                    };
                    layers.push(Layer::Residual { main, shortcut });
                    prev = out;
                }
                layers.push(Layer::GlobalPool);
                layers
            }
        }
    }

    fn projector(&mut self, repr_dim: usize, widths: &[usize]) -> Vec<Layer> {
        let mut layers = Vec::new();
        let mut prev = repr_dim;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(self.affine(&format!("proj.fc{i}"), prev, w, false));
            layers.push(self.bn(&format!("proj.bn{i}"), w));
            if i + 1 < widths.len() {
                layers.push(Layer::Relu);
            }
            prev = w;
        }
        layers
    }

    fn predictor(&mut self, proj_dim: usize, bottleneck: usize) -> Vec<Layer> {
        vec![
            self.affine("pred.fc0", proj_dim, bottleneck, false),
            self.bn("pred.bn0", bottleneck),
            Layer::Relu,
            self.affine("pred.fc1", bottleneck, proj_dim, true),
        ]
    }
}

// ---- model ----------------------------------------------------------------

/// Graph nodes of one Siamese model.
#[derive(Clone, Copy, Debug)]
pub struct ModelNodes {
    pub x1: NodeId,
    pub x2: NodeId,
    pub repr: NodeId,
    pub z1: NodeId,
    pub z2: NodeId,
    pub p1: NodeId,
    pub p2: NodeId,
    pub term1: NodeId,
    pub term2: NodeId,
    pub loss: NodeId,
}

/// Values from one training-mode forward pass.
#[derive(Clone, Debug)]
pub struct LossParts<T> {
    pub loss: f64,
    pub term1: f64,
    pub term2: f64,
    pub z1: Tensor<T>,
    pub z2: Tensor<T>,
}

pub const NN_KEY: &str = "nn";

/// Online encoder, projector and predictor in one graph. BYOL adds a frozen
/// target copy of encoder and projector; NNSiam adds a support queue.
pub struct SiameseModel<T: Scalar> {
    pub variant: Variant,
    pub encoder: EncoderConfig,
    pub heads: ResolvedHeads,
    pub input: InputShape,
    pub tau: f64,
    pub queue: Option<NNQueue<T>>,
    graph: Graph<T>,
    nodes: ModelNodes,
    online_params: usize,
    encoder_params: usize,
    ema_params: Vec<(ParamId, ParamId)>,
    ema_stats: Vec<(StatsId, StatsId)>,
}

fn nn_hook<'q, T: Scalar>(
    queue: Option<&'q NNQueue<T>>,
) -> impl FnMut(&str, &[&Tensor<T>]) -> ncsl_diffcore::Result<Tensor<T>> + 'q {
    move |key, args| {
        if key != NN_KEY {
            return Err(ncsl_diffcore::DiffError::InvalidArgument(format!("unknown external node `{key}`")));
        }
        match queue {
            Some(q) if q.is_full() => {
                q.lookup_rows(args[0]).map_err(|e| ncsl_diffcore::DiffError::InvalidArgument(e.to_string()))
            }
            _ => Ok(args[0].clone()),
        }
    }
}

pub fn build_siamese<T: Scalar>(
    enc: &EncoderConfig,
    heads: &HeadConfig,
    variant: Variant,
    input: InputShape,
    opts: &ModelOptions,
    seed: u64,
) -> Result<SiameseModel<T>> {
    enc.validate()?;
    let heads = heads.resolve(enc.repr_dim)?;
    if input.numel() == 0 {
        return Err(CoreError::config("input", "image shape must be positive"));
    }
    if variant == Variant::Byol && !(0.0..=1.0).contains(&opts.tau) {
        return Err(CoreError::config("tau", format!("must be in [0, 1], got {}", opts.tau)));
    }
    let queue = match variant {
        Variant::Nnsiam => Some(NNQueue::new(opts.queue_capacity, heads.proj_dim())?),
        _ => None,
    };

    let mut g = Graph::<T>::new();
    let mut rng = stream(seed, &[TAG_INIT]);
    let (enc_layers, proj_layers, pred_layers) = {
        let mut b = Builder { g: &mut g, rng: &mut rng, prefix: "", trainable: true };
        let e = b.encoder(enc, input);
        let encoder_params = b.g.params().iter().map(|p| p.value.len()).sum::<usize>();
        let p = b.projector(enc.repr_dim, &heads.projector);
        let q = b.predictor(heads.proj_dim(), heads.bottleneck);
        ((e, encoder_params), p, q)
    };
    let (enc_layers, encoder_params) = enc_layers;
    let online_params = g.params().iter().map(|p| p.value.len()).sum();
    let online_count = g.params().len();
    let online_stats = g.stats().len();

    let x1 = g.input("x1");
    let x2 = g.input("x2");
    let h1 = apply(&mut g, &enc_layers, x1);
    let h2 = apply(&mut g, &enc_layers, x2);
    let z1 = apply(&mut g, &proj_layers, h1);
    let z2 = apply(&mut g, &proj_layers, h2);
    let p1 = apply(&mut g, &pred_layers, z1);
    let p2 = apply(&mut g, &pred_layers, z2);

    let mut ema_params = Vec::new();
    let mut ema_stats = Vec::new();
    let (t1, t2) = match variant {
        Variant::Simsiam => (g.stop_grad(z1), g.stop_grad(z2)),
        Variant::Nnsiam => {
            let a = g.external(NN_KEY, &[z1]);
            let b = g.external(NN_KEY, &[z2]);
            (g.stop_grad(a), g.stop_grad(b))
        }
        Variant::Byol => {
            let (te, tp) = {
                let mut b = Builder { g: &mut g, rng: &mut rng, prefix: "target.", trainable: false };
                let te = b.encoder(enc, input);
                let tp = b.projector(enc.repr_dim, &heads.projector);
                (te, tp)
            };
            // the target starts as an exact copy of the online network
            let online_names: Vec<String> = g.params()[..online_count].iter().map(|p| p.name.clone()).collect();
            for name in online_names.iter().filter(|n| n.starts_with("enc.") || n.starts_with("proj.")) {
                let o = g.param_id(name).expect("online param");
                let t = g.param_id(&format!("target.{name}")).expect("target param");
                let v = g.param(o).value.clone();
                g.param_mut(t).value = v;
                ema_params.push((t, o));
            }
            let stat_names: Vec<String> = g.stats()[..online_stats].iter().map(|s| s.name.clone()).collect();
            for name in stat_names.iter().filter(|n| n.starts_with("enc.") || n.starts_with("proj.")) {
                let o = g.stats_id(name).expect("online stats");
                let t = g.stats_id(&format!("target.{name}")).expect("target stats");
                ema_stats.push((t, o));
            }
            let th1 = apply(&mut g, &te, x1);
            let tz1 = apply(&mut g, &tp, th1);
            let th2 = apply(&mut g, &te, x2);
            let tz2 = apply(&mut g, &tp, th2);
            (g.stop_grad(tz1), g.stop_grad(tz2))
        }
    };

    let term = |g: &mut Graph<T>, p: NodeId, t: NodeId| {
        let pn = g.l2_normalize(p);
        let tn = g.l2_normalize(t);
        let d = g.row_dot(pn, tn);
        let m = g.mean(d);
        g.scale(m, -0.5)
    };
    let term1 = term(&mut g, p1, t2);
    let term2 = term(&mut g, p2, t1);
    let loss = g.add(term1, term2);
    for (id, name) in [(h1, "repr"), (z1, "z1"), (z2, "z2"), (p1, "p1"), (p2, "p2"), (term1, "term1"), (term2, "term2"), (loss, "loss")] {
        g.name_node(id, name);
    }

    Ok(SiameseModel {
        variant,
        encoder: enc.clone(),
        heads,
        input,
        tau: opts.tau,
        queue,
        graph: g,
        nodes: ModelNodes { x1, x2, repr: h1, z1, z2, p1, p2, term1, term2, loss },
        online_params,
        encoder_params,
        ema_params,
        ema_stats,
    })
}

/// `D(p, z) = -mean_i <p_i / |p_i|, z_i / |z_i|>`.
pub fn negative_cosine<T: Scalar>(p: &Tensor<T>, z: &Tensor<T>) -> Result<f64> {
    if p.rank() != 2 || p.shape() != z.shape() {
        return Err(CoreError::Invalid(format!("negative_cosine needs equal (B, d) shapes, got {:?} and {:?}", p.shape(), z.shape())));
    }
    let d = p.shape()[1];
    let mut total = 0.0;
    for (row, (a, b)) in p.data().chunks(d).zip(z.data().chunks(d)).enumerate() {
        let na = a.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
        if na < 1e-12 {
            return Err(CoreError::ZeroNorm { what: "p".into(), row });
        }
        if nb < 1e-12 {
            return Err(CoreError::ZeroNorm { what: "z".into(), row });
        }
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
        total += dot / (na * nb);
    }
    Ok(-total / p.shape()[0] as f64)
}

/// Training-mode symmetrized loss; activations stay cached for backward.
pub fn siamese_loss<T: Scalar>(model: &mut SiameseModel<T>, x1: &Tensor<T>, x2: &Tensor<T>) -> Result<LossParts<T>> {
    model.forward(x1, x2)
}

impl<T: Scalar> SiameseModel<T> {
    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph<T> {
        &mut self.graph
    }

    /// Graph and queue borrowed together, e.g. to drive a gradient check
    /// with the NNSiam lookup hook.
    pub fn split_mut(&mut self) -> (&mut Graph<T>, impl FnMut(&str, &[&Tensor<T>]) -> ncsl_diffcore::Result<Tensor<T>> + '_) {
        (&mut self.graph, nn_hook(self.queue.as_ref()))
    }

    pub fn nodes(&self) -> ModelNodes {
        self.nodes
    }

    /// Trainable scalars in encoder, projector and predictor.
    pub fn param_count(&self) -> usize {
        self.online_params
    }

    pub fn encoder_param_count(&self) -> usize {
        self.encoder_params
    }

    pub fn proj_dim(&self) -> usize {
        self.heads.proj_dim()
    }

    fn check_batch(&self, x1: &Tensor<T>, x2: &Tensor<T>) -> Result<()> {
        let want = [self.input.channels, self.input.height, self.input.width];
        if x1.shape() != x2.shape() || x1.rank() != 4 || x1.shape()[1..] != want {
            return Err(CoreError::Invalid(format!(
                "views must both be (B, {}, {}, {}), got {:?} and {:?}",
                want[0],
                want[1],
                want[2],
                x1.shape(),
                x2.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, x1: &Tensor<T>, x2: &Tensor<T>) -> Result<LossParts<T>> {
        self.check_batch(x1, x2)?;
        let n = self.nodes;
        let mut hook = nn_hook(self.queue.as_ref());
        let out = self.graph.evaluate_with(
            &[("x1", x1), ("x2", x2)],
            &[n.loss, n.term1, n.term2, n.z1, n.z2],
            Mode::Train,
            &mut hook,
        )?;
        let mut it = out.into_iter();
        let mut scalar = || it.next().unwrap();
        let loss = scalar().item().unwrap().as_f64();
        let term1 = scalar().item().unwrap().as_f64();
        let term2 = scalar().item().unwrap().as_f64();
        let z1 = scalar();
        let z2 = scalar();
        Ok(LossParts { loss, term1, term2, z1, z2 })
    }

    /// Accumulates gradients of the last [`SiameseModel::forward`] loss.
    pub fn backward(&mut self) -> Result<()> {
        Ok(self.graph.backward(self.nodes.loss)?)
    }

    /// Variant-specific bookkeeping after an optimizer step: the BYOL EMA
    /// update, or pushing both projections into the NNSiam queue.
    pub fn after_step(&mut self, parts: &LossParts<T>) -> Result<()> {
        match self.variant {
            Variant::Simsiam => {}
            Variant::Byol => ema_update_in_graph(&mut self.graph, &self.ema_params, &self.ema_stats, self.tau)?,
            Variant::Nnsiam => {
                let q = self.queue.as_mut().expect("nnsiam model owns a queue");
                q.push_rows(&parts.z1)?;
                q.push_rows(&parts.z2)?;
            }
        }
        Ok(())
    }

    /// `(target, online)` parameter pairs of the BYOL EMA.
    pub fn ema_pairs(&self) -> &[(ParamId, ParamId)] {
        &self.ema_params
    }

    /// Evaluation-mode encoder output, `(B, repr_dim)`.
    pub fn represent(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.graph.infer(&[("x1", x)], &[self.nodes.repr])?;
        Ok(out.into_iter().next().unwrap())
    }

    /// Evaluation-mode loss without side effects.
    pub fn eval_loss(&self, x1: &Tensor<T>, x2: &Tensor<T>) -> Result<f64> {
        self.check_batch(x1, x2)?;
        let mut hook = nn_hook(self.queue.as_ref());
        let out = self.graph.infer_with(&[("x1", x1), ("x2", x2)], &[self.nodes.loss], &mut hook)?;
        Ok(out[0].item().unwrap().as_f64())
    }

    pub fn save_state(&self, ck: &mut Checkpoint) {
        ck.put_graph("model/", &self.graph);
        if let Some(q) = &self.queue {
            let (storage, fill, next) = q.state();
            ck.insert_tensor("queue/storage", &storage);
            ck.insert("queue/meta", TensorData::F64(Tensor::from_f64(&[2], &[fill as f64, next as f64]).unwrap()));
        }
    }

    pub fn load_state(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.restore_graph("model/", &mut self.graph)?;
        if let Some(q) = &mut self.queue {
            let storage: Tensor<T> = ck.tensor("queue/storage")?;
            let meta: Tensor<f64> = ck.tensor("queue/meta")?;
            q.restore(&storage, meta.data()[0] as usize, meta.data()[1] as usize)?;
        }
        Ok(())
    }
}

// ---- distillation student -------------------------------------------------

/// Encoder plus an affine head regressing a target vector under mean
/// squared error: `loss = mean_i |head(enc(x_i)) - t_i|^2 / d`.
pub struct StudentModel<T: Scalar> {
    pub encoder: EncoderConfig,
    pub input: InputShape,
    pub out_dim: usize,
    graph: Graph<T>,
    repr: NodeId,
    out: NodeId,
    loss: NodeId,
}

pub const STUDENT_HEAD: &str = "head.fc";

pub fn build_student<T: Scalar>(enc: &EncoderConfig, input: InputShape, out_dim: usize, seed: u64) -> Result<StudentModel<T>> {
    enc.validate()?;
    if input.numel() == 0 || out_dim == 0 {
        return Err(CoreError::config("student", "input shape and output width must be positive"));
    }
    let mut g = Graph::<T>::new();
    let mut rng = stream(seed, &[TAG_INIT]);
    let (enc_layers, head) = {
        let mut b = Builder { g: &mut g, rng: &mut rng, prefix: "", trainable: true };
        let e = b.encoder(enc, input);
        let h = b.affine(STUDENT_HEAD, enc.repr_dim, out_dim, true);
        (e, h)
    };
    let x = g.input("x");
    let t = g.input("t");
    let repr = apply(&mut g, &enc_layers, x);
    let out = apply(&mut g, &[head], repr);
    let neg = g.scale(t, -1.0);
    let diff = g.add(out, neg);
    let sq = g.row_dot(diff, diff);
    let m = g.mean(sq);
    let loss = g.scale(m, 1.0 / out_dim as f64);
    g.name_node(repr, "repr");
    g.name_node(loss, "loss");
    Ok(StudentModel { encoder: enc.clone(), input, out_dim, graph: g, repr, out, loss })
}

impl<T: Scalar> StudentModel<T> {
    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph<T> {
        &mut self.graph
    }

    fn check(&self, x: &Tensor<T>, t: Option<&Tensor<T>>) -> Result<()> {
        let want = [self.input.channels, self.input.height, self.input.width];
        if x.rank() != 4 || x.shape()[1..] != want {
            return Err(CoreError::Invalid(format!("student input must be (B, {}, {}, {}), got {:?}", want[0], want[1], want[2], x.shape())));
        }
        if let Some(t) = t {
            if t.shape() != [x.shape()[0], self.out_dim] {
                return Err(CoreError::Invalid(format!(
                    "target must be ({}, {}), got {:?}",
                    x.shape()[0],
                    self.out_dim,
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Training-mode loss; activations stay cached for backward.
    pub fn forward(&mut self, x: &Tensor<T>, t: &Tensor<T>) -> Result<f64> {
        self.check(x, Some(t))?;
        let out = self.graph.evaluate(&[("x", x), ("t", t)], &[self.loss], Mode::Train)?;
        Ok(out[0].item().unwrap().as_f64())
    }

    pub fn backward(&mut self) -> Result<()> {
        Ok(self.graph.backward(self.loss)?)
    }

    pub fn eval_loss(&self, x: &Tensor<T>, t: &Tensor<T>) -> Result<f64> {
        self.check(x, Some(t))?;
        let out = self.graph.infer(&[("x", x), ("t", t)], &[self.loss])?;
        Ok(out[0].item().unwrap().as_f64())
    }

    /// Evaluation-mode head output.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x, None)?;
        Ok(self.graph.infer(&[("x", x)], &[self.out])?.remove(0))
    }

    pub fn represent(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x, None)?;
        Ok(self.graph.infer(&[("x", x)], &[self.repr])?.remove(0))
    }

    pub fn save_state(&self, ck: &mut Checkpoint) {
        ck.put_graph("model/", &self.graph);
    }

    pub fn load_state(&mut self, ck: &Checkpoint) -> Result<()> {
        Ok(ck.restore_graph("model/", &mut self.graph)?)
    }
}

/// Frozen feature extractor evaluated in inference mode.
pub trait Backbone: Sync {
    fn input_shape(&self) -> InputShape;
    fn repr_dim(&self) -> usize;
    /// `(B, C, H, W)` images to `(B, repr_dim)` representations.
    fn represent(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
    /// Hash of every stored value; equal before and after any evaluation.
    fn checksum(&self) -> u64;
}

/// FNV-1a over parameter and statistic bits in graph order.
pub fn graph_checksum<T: Scalar>(g: &Graph<T>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |v: f64| {
        for b in v.to_bits().to_le_bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
    };
    for p in g.params() {
        p.value.data().iter().for_each(|v| eat(v.as_f64()));
    }
    for s in g.stats() {
        s.mean.data().iter().chain(s.var.data()).for_each(|v| eat(v.as_f64()));
    }
    h
}

impl Backbone for SiameseModel<f32> {
    fn input_shape(&self) -> InputShape {
        self.input
    }

    fn repr_dim(&self) -> usize {
        self.encoder.repr_dim
    }

    fn represent(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        SiameseModel::represent(self, x)
    }

    fn checksum(&self) -> u64 {
        graph_checksum(&self.graph)
    }
}

impl Backbone for StudentModel<f32> {
    fn input_shape(&self) -> InputShape {
        self.input
    }

    fn repr_dim(&self) -> usize {
        self.encoder.repr_dim
    }

    fn represent(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        StudentModel::represent(self, x)
    }

    fn checksum(&self) -> u64 {
        graph_checksum(&self.graph)
    }
}
