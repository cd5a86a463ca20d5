//! The two reference networks at desk scale: a four-layer sigmoid CNN
//! classifier and a one-level U-Net style segmenter, plus local SGD training,
//! gradient extraction and accuracy evaluation.

use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::data::{Batch, Label, Sample, NUM_CLASSES};
use crate::error::{CoreError, Result};
use crate::gradvec::{GradientVector, Layout, ModelParams};
use crate::graph::{Graph, NodeId};
use crate::nn;
use crate::rng;
use crate::tensor::Tensor;

/// Standard deviation for normal parameter initialization.
pub const SIGMA_INIT: f64 = 0.1;

/// Default conv channel widths of the desk-scale classifier.
pub const DEFAULT_CONV_CHANNELS: [usize; 3] = [8, 8, 8];

const CLASSIFIER_KERNEL: usize = 5;
const SEGMENTER_KERNEL: usize = 3;
const SEGMENTER_WIDTH: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierSpec {
    /// `[C, H, W]` input shape.
    pub input: [usize; 3],
    pub conv_channels: [usize; 3],
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmenterSpec {
    /// `[3, H, W]` input shape.
    pub input: [usize; 3],
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelSpec {
    Classifier(ClassifierSpec),
    Segmenter(SegmenterSpec),
}

impl ModelSpec {
    pub fn input_shape(&self) -> [usize; 3] {
        match self {
            ModelSpec::Classifier(c) => c.input,
            ModelSpec::Segmenter(s) => s.input,
        }
    }

    pub fn is_classifier(&self) -> bool {
        matches!(self, ModelSpec::Classifier(_))
    }

    /// The deterministic flat parameter layout of this architecture.
    pub fn layout(&self) -> Layout {
        match self {
            ModelSpec::Classifier(c) => {
                let mut parts = Vec::new();
                let mut in_ch = c.input[0];
                let k = CLASSIFIER_KERNEL;
                for (i, &out_ch) in c.conv_channels.iter().enumerate() {
                    parts.push((format!("conv{}.w", i + 1), vec![out_ch, in_ch, k, k]));
                    parts.push((format!("conv{}.b", i + 1), vec![out_ch]));
                    in_ch = out_ch;
                }
                let side = c.input[1] - 3 * (k - 1);
                let features = in_ch * side * side;
                parts.push(("fc.w".into(), vec![c.classes, features]));
                parts.push(("fc.b".into(), vec![c.classes]));
                Layout::new(parts)
            }
            ModelSpec::Segmenter(s) => {
                let k = SEGMENTER_KERNEL;
                let w = s.width;
                Layout::new(vec![
                    ("enc.w".into(), vec![w, s.input[0], k, k]),
                    ("enc.b".into(), vec![w]),
                    ("mid.w".into(), vec![w, w, k, k]),
                    ("mid.b".into(), vec![w]),
                    ("dec.w".into(), vec![1, 2 * w, k, k]),
                    ("dec.b".into(), vec![1]),
                ])
            }
        }
    }
}

/// Builds the classification CNN: three 5x5 sigmoid conv layers followed by a
/// fully connected softmax layer over 10 classes. `channels` is the input
/// channel count.
pub fn build_classifier(input_size: usize, channels: usize, seed: u64) -> Result<(ModelSpec, ModelParams)> {
    build_classifier_with(input_size, channels, DEFAULT_CONV_CHANNELS, seed)
}

/// Same as [`build_classifier`] with explicit conv widths.
pub fn build_classifier_with(
    input_size: usize,
    channels: usize,
    conv_channels: [usize; 3],
    seed: u64,
) -> Result<(ModelSpec, ModelParams)> {
    // Three valid 5x5 convs eat 12 pixels per side.
    if input_size < 13 {
        return Err(CoreError::InvalidArgument(format!(
            "classifier input size {input_size} < 13"
        )));
    }
    if channels == 0 || conv_channels.contains(&0) {
        return Err(CoreError::InvalidArgument("channel counts must be >= 1".into()));
    }
    let spec = ModelSpec::Classifier(ClassifierSpec {
        input: [channels, input_size, input_size],
        conv_channels,
        classes: NUM_CLASSES,
    });
    let params = init_params(&spec, seed);
    Ok((spec, params))
}

/// Builds the one-level U-Net style segmenter: conv+sigmoid encoder, stride-2
/// downsample, conv bottleneck, nearest upsample, skip concat and a 1-channel
/// sigmoid head. Output spatial size equals input spatial size.
pub fn build_segmenter(input_size: usize, seed: u64) -> Result<(ModelSpec, ModelParams)> {
    if input_size == 0 || input_size % 2 != 0 {
        return Err(CoreError::InvalidArgument(format!(
            "segmenter input size {input_size} must be even"
        )));
    }
    let spec = ModelSpec::Segmenter(SegmenterSpec {
        input: [3, input_size, input_size],
        width: SEGMENTER_WIDTH,
    });
    let params = init_params(&spec, seed);
    Ok((spec, params))
}

/// Draws parameters from N(0, SIGMA_INIT^2), deterministically per seed.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ModelParams {
    let layout = Arc::new(spec.layout());
    let mut r = rng::stream(rng::derive(seed, "init"), 0);
    let values = rng::normal_vec(&mut r, layout.total_len(), SIGMA_INIT);
    ModelParams { values, layout }
}

/// Creates one graph leaf per layout entry from flat parameter values.
pub fn bind_params(g: &mut Graph, layout: &Layout, values: &[f64]) -> Result<Vec<NodeId>> {
    layout
        .unflatten(values)?
        .into_iter()
        .map(|t| Ok(g.leaf(t)))
        .collect()
}

/// Classifier forward pass to logits `[1, classes]`.
pub fn classifier_logits(
    g: &mut Graph,
    spec: &ClassifierSpec,
    params: &[NodeId],
    input: NodeId,
) -> Result<NodeId> {
    let mut x = input;
    for i in 0..3 {
        let conv = nn::conv2d(g, x, params[2 * i], params[2 * i + 1])?;
        x = g.sigmoid(conv);
    }
    let features = g.value(x).len();
    let col = g.reshape(x, vec![features, 1])?;
    let prod = g.matmul(params[6], col)?;
    let bias = g.reshape(params[7], vec![spec.classes, 1])?;
    let z = g.add(prod, bias)?;
    g.transpose(z)
}

/// Segmenter forward pass to per-pixel probabilities `[1, H, W]`.
pub fn segmenter_probs(
    g: &mut Graph,
    spec: &SegmenterSpec,
    params: &[NodeId],
    input: NodeId,
) -> Result<NodeId> {
    let _ = spec;
    let pad = SEGMENTER_KERNEL / 2;
    let pe = nn::pad2d(g, input, pad)?;
    let ce = nn::conv2d(g, pe, params[0], params[1])?;
    let enc = g.sigmoid(ce);
    let down = nn::downsample2(g, enc)?;
    let pm = nn::pad2d(g, down, pad)?;
    let cm = nn::conv2d(g, pm, params[2], params[3])?;
    let mid = g.sigmoid(cm);
    let up = nn::upsample2(g, mid)?;
    let cat = nn::concat_channels(g, up, enc)?;
    let pd = nn::pad2d(g, cat, pad)?;
    let cd = nn::conv2d(g, pd, params[4], params[5])?;
    Ok(g.sigmoid(cd))
}

/// Scalar training loss of one sample; the target node is a `[1, classes]`
/// probability row for the classifier or a `[1, H, W]` (possibly soft) mask
/// for the segmenter.
pub fn sample_loss(
    g: &mut Graph,
    spec: &ModelSpec,
    params: &[NodeId],
    input: NodeId,
    target: NodeId,
) -> Result<NodeId> {
    match spec {
        ModelSpec::Classifier(c) => {
            let logits = classifier_logits(g, c, params, input)?;
            nn::cross_entropy_rows(g, logits, target)
        }
        ModelSpec::Segmenter(s) => {
            let probs = segmenter_probs(g, s, params, input)?;
            nn::binary_cross_entropy(g, probs, target)
        }
    }
}

fn label_target_tensor(spec: &ModelSpec, label: &Label) -> Result<Tensor> {
    match (spec, label) {
        (ModelSpec::Classifier(c), Label::Class(k)) => {
            if *k >= c.classes {
                return Err(CoreError::InvalidArgument(format!(
                    "class {k} out of range for {} classes",
                    c.classes
                )));
            }
            Ok(nn::one_hot(*k, c.classes))
        }
        (ModelSpec::Segmenter(_), Label::Mask(m)) => Ok(m.clone()),
        _ => Err(CoreError::InvalidArgument(
            "label kind does not match model kind".into(),
        )),
    }
}

/// Mean batch loss and the flattened parameter gradient.
pub fn compute_gradient(
    spec: &ModelSpec,
    params: &ModelParams,
    batch: &Batch,
) -> Result<(f64, GradientVector)> {
    if batch.is_empty() {
        return Err(CoreError::InvalidArgument("empty batch".into()));
    }
    let expect = spec.input_shape();
    if batch.inputs.shape[1..] != expect {
        return Err(CoreError::ShapeMismatch {
            op: "compute_gradient",
            lhs: batch.inputs.shape.clone(),
            rhs: expect.to_vec(),
        });
    }
    let mut g = Graph::new();
    let pnodes = bind_params(&mut g, &params.layout, &params.values)?;
    let mut total: Option<NodeId> = None;
    for i in 0..batch.len() {
        let x = g.leaf(batch.sample_input(i));
        let t = g.leaf(label_target_tensor(spec, &batch.sample_label(i))?);
        let loss = sample_loss(&mut g, spec, &pnodes, x, t)?;
        total = Some(match total {
            Some(acc) => g.add(acc, loss)?,
            None => loss,
        });
    }
    let sum = total.expect("non-empty batch");
    let mean = g.mul_scalar(sum, 1.0 / batch.len() as f64);
    let grads = g.backward(mean, &pnodes)?;
    let tensors: Vec<Tensor> = grads.iter().map(|&id| g.value(id).clone()).collect();
    let values = params.layout.flatten(&tensors)?;
    Ok((
        g.value(mean).scalar_value(),
        GradientVector {
            values,
            layout: params.layout.clone(),
        },
    ))
}

/// Plain per-sample SGD over the shard. Returns the updated parameters and
/// the shard size, which FedAvg uses as the aggregation weight.
pub fn local_train(
    spec: &ModelSpec,
    params: &ModelParams,
    shard: &[Sample],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<(ModelParams, usize)> {
    if shard.is_empty() {
        return Err(CoreError::InvalidArgument("empty training shard".into()));
    }
    if epochs == 0 {
        return Err(CoreError::InvalidArgument("epochs must be >= 1".into()));
    }
    let mut out = params.clone();
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut r = rng::stream(rng::derive(seed, "train"), 0);
    for _ in 0..epochs {
        order.shuffle(&mut r);
        for &i in &order {
            let batch = Batch::from_samples(std::slice::from_ref(&shard[i]))?;
            let (_, grad) = compute_gradient(spec, &out, &batch)?;
            out.sgd_step(&grad, lr)?;
        }
    }
    Ok((out, shard.len()))
}

/// Classifier prediction for one input.
pub fn predict_class(spec: &ClassifierSpec, params: &ModelParams, input: &Tensor) -> Result<usize> {
    let mut g = Graph::new();
    let pnodes = bind_params(&mut g, &params.layout, &params.values)?;
    let x = g.leaf(input.clone());
    let logits = classifier_logits(&mut g, spec, &pnodes, x)?;
    let v = &g.value(logits).data;
    let mut best = 0;
    for (i, &p) in v.iter().enumerate() {
        if p > v[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Segmenter mask probabilities for one input.
pub fn predict_mask(spec: &SegmenterSpec, params: &ModelParams, input: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let pnodes = bind_params(&mut g, &params.layout, &params.values)?;
    let x = g.leaf(input.clone());
    let probs = segmenter_probs(&mut g, spec, &pnodes, x)?;
    Ok(g.value(probs).clone())
}

/// How a continuous dummy label is squashed into a valid target during the
/// gradient inversion attack.
#[derive(Clone, Debug, PartialEq)]
pub enum LabelRelaxation {
    /// Logits of this length fed through a softmax row.
    Softmax { classes: usize },
    /// Logits of this shape fed through an elementwise sigmoid.
    Sigmoid { shape: Vec<usize> },
}

impl LabelRelaxation {
    pub fn logit_len(&self) -> usize {
        match self {
            LabelRelaxation::Softmax { classes } => *classes,
            LabelRelaxation::Sigmoid { shape } => shape.iter().product(),
        }
    }
}

/// A differentiable model the attack can target: a parameter layout, an input
/// shape, a label relaxation and a traced scalar loss.
pub trait DiffModel {
    fn param_layout(&self) -> Layout;
    fn input_shape(&self) -> Vec<usize>;
    fn label_relaxation(&self) -> LabelRelaxation;
    /// Builds the scalar training loss for one (input, target) pair. The
    /// target node carries probabilities, one-hot rows or soft masks.
    fn build_loss(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        input: NodeId,
        target: NodeId,
    ) -> Result<NodeId>;
}

impl DiffModel for ModelSpec {
    fn param_layout(&self) -> Layout {
        self.layout()
    }

    fn input_shape(&self) -> Vec<usize> {
        self.input_shape().to_vec()
    }

    fn label_relaxation(&self) -> LabelRelaxation {
        match self {
            ModelSpec::Classifier(c) => LabelRelaxation::Softmax { classes: c.classes },
            ModelSpec::Segmenter(s) => LabelRelaxation::Sigmoid {
                shape: vec![1, s.input[1], s.input[2]],
            },
        }
    }

    fn build_loss(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        input: NodeId,
        target: NodeId,
    ) -> Result<NodeId> {
        sample_loss(g, self, params, input, target)
    }
}

/// One-layer logistic model: sigmoid(w . x + b) with binary cross-entropy.
/// For this model the weight gradient is (p - y) x and the bias gradient is
/// (p - y), so a shared gradient determines the input analytically; the
/// attack tests use that as an oracle.
#[derive(Clone, Debug)]
pub struct LogisticModel {
    pub dim: usize,
}

impl DiffModel for LogisticModel {
    fn param_layout(&self) -> Layout {
        Layout::new(vec![("w".into(), vec![self.dim]), ("b".into(), vec![1])])
    }

    fn input_shape(&self) -> Vec<usize> {
        vec![self.dim]
    }

    fn label_relaxation(&self) -> LabelRelaxation {
        LabelRelaxation::Sigmoid { shape: vec![1] }
    }

    fn build_loss(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        input: NodeId,
        target: NodeId,
    ) -> Result<NodeId> {
        let z = nn::dot(g, params[0], input)?;
        let zb = g.add(z, params[1])?;
        let p = g.sigmoid(zb);
        nn::binary_cross_entropy(g, p, target)
    }
}

/// Loss and flat parameter gradient of one (input, soft target) pair for any
/// attackable model. The DLG experiments use this to produce shared
/// gradients, including exact targets at chosen dummy states.
pub fn compute_gradient_soft<M: DiffModel + ?Sized>(
    model: &M,
    params: &ModelParams,
    input: &Tensor,
    target: &Tensor,
) -> Result<(f64, GradientVector)> {
    let mut g = Graph::new();
    let pnodes = bind_params(&mut g, &params.layout, &params.values)?;
    let x = g.leaf(input.clone());
    let t = g.leaf(target.clone());
    let loss = model.build_loss(&mut g, &pnodes, x, t)?;
    let grads = g.backward(loss, &pnodes)?;
    let tensors: Vec<Tensor> = grads.iter().map(|&id| g.value(id).clone()).collect();
    let values = params.layout.flatten(&tensors)?;
    Ok((
        g.value(loss).scalar_value(),
        GradientVector {
            values,
            layout: params.layout.clone(),
        },
    ))
}

/// Fraction of argmax-correct predictions (classifier) or mean pixel accuracy
/// at threshold 0.5 (segmenter). Always in [0, 1].
pub fn evaluate_accuracy(spec: &ModelSpec, params: &ModelParams, testset: &[Sample]) -> Result<f64> {
    if testset.is_empty() {
        return Err(CoreError::InvalidArgument("empty test set".into()));
    }
    match spec {
        ModelSpec::Classifier(c) => {
            let mut correct = 0usize;
            for s in testset {
                let Label::Class(k) = s.label else {
                    return Err(CoreError::InvalidArgument("expected class labels".into()));
                };
                if predict_class(c, params, &s.input)? == k {
                    correct += 1;
                }
            }
            Ok(correct as f64 / testset.len() as f64)
        }
        ModelSpec::Segmenter(seg) => {
            let mut acc = 0.0;
            for s in testset {
                let Label::Mask(m) = &s.label else {
                    return Err(CoreError::InvalidArgument("expected mask labels".into()));
                };
                let probs = predict_mask(seg, params, &s.input)?;
                if probs.shape != m.shape {
                    return Err(CoreError::ShapeMismatch {
                        op: "evaluate_accuracy",
                        lhs: probs.shape,
                        rhs: m.shape.clone(),
                    });
                }
                let hits = probs
                    .data
                    .iter()
                    .zip(&m.data)
                    .filter(|(p, t)| (**p >= 0.5) == (**t == 1.0))
                    .count();
                acc += hits as f64 / m.data.len() as f64;
            }
            Ok(acc / testset.len() as f64)
        }
    }
}
