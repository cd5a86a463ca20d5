//! Deep leakage from gradients: reconstruct a training input (and label) by
//! optimizing dummy data until its model gradient matches an intercepted one.
//!
//! The match objective is a function of the model's parameter gradient, so
//! each optimizer step differentiates *through* a backward pass; the graph
//! engine's traceable adjoints make that a second `backward` call.

use crate::data::Label;
use crate::defenses::DefenseConfig;
use crate::error::{CoreError, Result};
use crate::gradvec::{GradientVector, ModelParams};
use crate::graph::{Graph, NodeId};
use crate::models::{DiffModel, LabelRelaxation};
use crate::nn;
use crate::optim::{Adam, AdamConfig, Lbfgs, LbfgsConfig};
use crate::rng;
use crate::tensor::Tensor;

/// Cap standing in for an infinite PSNR when the reconstruction is exact.
pub const PSNR_SENTINEL: f64 = 300.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackObjective {
    /// Sum of squared differences over all gradient coordinates.
    Sse,
    /// Sum over layout entries of (1 - cosine similarity).
    NegCosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackOptimizer {
    Lbfgs,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DummyInit {
    /// N(0,1) per coordinate.
    Normal,
    /// U(0,1) per coordinate.
    Uniform,
}

#[derive(Clone, Debug)]
pub struct AttackConfig {
    pub objective: AttackObjective,
    pub optimizer: AttackOptimizer,
    pub lr: f64,
    /// Outer iterations; one history entry is recorded per outer iteration.
    pub max_outer_iters: usize,
    /// Optimizer iterations per outer iteration.
    pub lbfgs_max_inner: usize,
    pub seed: u64,
    pub init: DummyInit,
    /// Stop once the match loss drops below this.
    pub early_stop_loss: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            objective: AttackObjective::Sse,
            optimizer: AttackOptimizer::Lbfgs,
            lr: 1.0,
            max_outer_iters: 300,
            lbfgs_max_inner: 20,
            seed: 0,
            init: DummyInit::Normal,
            early_stop_loss: 1e-12,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "attack lr must be > 0, got {}",
                self.lr
            )));
        }
        if self.max_outer_iters == 0 || self.lbfgs_max_inner == 0 {
            return Err(CoreError::InvalidArgument(
                "attack iteration counts must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ReconstructionResult {
    pub dummy_input: Tensor,
    /// Relaxed label after its squashing nonlinearity (softmax probabilities
    /// or sigmoid mask); the fixed ground truth in input-only mode.
    pub dummy_label: Tensor,
    /// Best (lowest) match loss seen, equal to the minimum of `history`.
    pub final_grad_match_loss: f64,
    /// Match loss recorded once per outer iteration.
    pub history: Vec<f64>,
    pub mse_to_truth: Option<f64>,
    pub psnr_to_truth: Option<f64>,
    /// Set when the objective became non-finite and the run was aborted.
    pub diverged: bool,
}

impl ReconstructionResult {
    /// Fills image metrics against a ground-truth input, clamping the dummy
    /// to the [0,1] image range first.
    pub fn add_truth_metrics(&mut self, truth: &Tensor) -> Result<()> {
        let clamped = Tensor {
            shape: self.dummy_input.shape.clone(),
            data: self.dummy_input.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        };
        self.mse_to_truth = Some(mse_image(&clamped, truth)?);
        self.psnr_to_truth = Some(psnr(&clamped, truth, 1.0)?);
        Ok(())
    }
}

enum LabelVar {
    /// Continuous logits optimized jointly with the input.
    Free(Vec<f64>),
    /// Ground-truth target tensor, excluded from optimization.
    Fixed(Tensor),
}

/// Loss and gradient of the gradient-match objective with respect to the
/// dummy input (and dummy label logits when present). One evaluation builds
/// the forward graph, differentiates the training loss with respect to the
/// parameters, forms the match objective against `target`, and
/// differentiates that objective with respect to the dummy variables.
pub fn grad_of_gradient_objective<M: DiffModel + ?Sized>(
    model: &M,
    params: &ModelParams,
    dummy_input: &[f64],
    dummy_label_logits: Option<&[f64]>,
    fixed_label: Option<&Tensor>,
    target: &GradientVector,
    objective: AttackObjective,
) -> Result<(f64, Vec<f64>)> {
    if target.layout != params.layout {
        return Err(CoreError::LayoutMismatch(
            "target gradient layout does not match the model".into(),
        ));
    }
    let mut g = Graph::new();
    let pnodes: Vec<NodeId> = params
        .layout
        .unflatten(&params.values)?
        .into_iter()
        .map(|t| g.leaf(t))
        .collect();
    let input = g.leaf(Tensor::new(model.input_shape(), dummy_input.to_vec())?);

    let (target_node, label_leaf) = match (dummy_label_logits, fixed_label) {
        (Some(logits), None) => match model.label_relaxation() {
            LabelRelaxation::Softmax { classes } => {
                let leaf = g.leaf(Tensor::new(vec![1, classes], logits.to_vec())?);
                (nn::softmax_rows(&mut g, leaf)?, Some(leaf))
            }
            LabelRelaxation::Sigmoid { shape } => {
                let leaf = g.leaf(Tensor::new(shape, logits.to_vec())?);
                (g.sigmoid(leaf), Some(leaf))
            }
        },
        (None, Some(t)) => (g.leaf(t.clone()), None),
        _ => {
            return Err(CoreError::InvalidArgument(
                "exactly one of dummy logits or a fixed label is required".into(),
            ))
        }
    };

    let inner_loss = model.build_loss(&mut g, &pnodes, input, target_node)?;
    let grads = g.backward(inner_loss, &pnodes)?;

    let target_tensors = target.layout.unflatten(&target.values)?;
    let mut match_loss: Option<NodeId> = None;
    for (&gnode, tt) in grads.iter().zip(target_tensors) {
        let tnode = g.leaf(tt);
        let term = match objective {
            AttackObjective::Sse => nn::sse(&mut g, gnode, tnode)?,
            AttackObjective::NegCosine => {
                let cos = nn::cosine_similarity(&mut g, gnode, tnode)?;
                let neg = g.neg(cos);
                g.add_scalar(neg, 1.0)
            }
        };
        match_loss = Some(match match_loss {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let match_loss = match_loss
        .ok_or_else(|| CoreError::InvalidArgument("model has no parameters".into()))?;

    let mut wrt = vec![input];
    if let Some(l) = label_leaf {
        wrt.push(l);
    }
    let outer = g.backward(match_loss, &wrt)?;
    let mut grad = g.value(outer[0]).data.clone();
    if outer.len() > 1 {
        grad.extend_from_slice(&g.value(outer[1]).data);
    }
    Ok((g.value(match_loss).scalar_value(), grad))
}

/// Joint reconstruction of input and label from a shared gradient.
pub fn dlg_reconstruct<M: DiffModel + ?Sized>(
    model: &M,
    params: &ModelParams,
    target: &GradientVector,
    cfg: &AttackConfig,
) -> Result<ReconstructionResult> {
    cfg.validate()?;
    let input0 = init_values(
        model.input_shape().iter().product(),
        cfg.init,
        cfg.seed,
        "dummy_input",
    );
    let logits0 = init_values(
        model.label_relaxation().logit_len(),
        DummyInit::Normal,
        cfg.seed,
        "dummy_label",
    );
    run_attack(model, params, target, cfg, input0, LabelVar::Free(logits0))
}

/// Input-only reconstruction given the true label or mask.
pub fn dlg_input_only<M: DiffModel + ?Sized>(
    model: &M,
    params: &ModelParams,
    target: &GradientVector,
    true_label: Tensor,
    cfg: &AttackConfig,
) -> Result<ReconstructionResult> {
    cfg.validate()?;
    let input0 = init_values(
        model.input_shape().iter().product(),
        cfg.init,
        cfg.seed,
        "dummy_input",
    );
    run_attack(model, params, target, cfg, input0, LabelVar::Fixed(true_label))
}

/// Input-only reconstruction from an explicit starting point, for fixed-point
/// and warm-start experiments.
pub fn dlg_input_only_from<M: DiffModel + ?Sized>(
    model: &M,
    params: &ModelParams,
    target: &GradientVector,
    true_label: Tensor,
    input0: Vec<f64>,
    cfg: &AttackConfig,
) -> Result<ReconstructionResult> {
    cfg.validate()?;
    run_attack(model, params, target, cfg, input0, LabelVar::Fixed(true_label))
}

/// Applies the defense to the sample's true gradient, then attacks the
/// defended gradient. Truth metrics are filled from the sample input. The
/// attacker matches over all coordinates, including zeroed ones.
pub fn attack_under_defense<M: DiffModel + ?Sized>(
    model: &M,
    params: &ModelParams,
    input: &Tensor,
    label: &Label,
    defense: &DefenseConfig,
    cfg: &AttackConfig,
) -> Result<(ReconstructionResult, DefenseConfig)> {
    let target_tensor = label_to_target(model, label)?;
    let (_, grad) = crate::models::compute_gradient_soft(model, params, input, &target_tensor)?;
    let defended = defense.apply(&grad)?;
    let mut result = dlg_reconstruct(model, params, &defended, cfg)?;
    result.add_truth_metrics(input)?;
    Ok((result, defense.clone()))
}

/// Ground-truth label as the target tensor the model's loss consumes.
pub fn label_to_target<M: DiffModel + ?Sized>(model: &M, label: &Label) -> Result<Tensor> {
    match (model.label_relaxation(), label) {
        (LabelRelaxation::Softmax { classes }, Label::Class(k)) => {
            if *k >= classes {
                return Err(CoreError::InvalidArgument(format!(
                    "class {k} out of range for {classes} classes"
                )));
            }
            Ok(nn::one_hot(*k, classes))
        }
        (LabelRelaxation::Sigmoid { shape }, Label::Mask(m)) => {
            if m.shape != shape {
                return Err(CoreError::ShapeMismatch {
                    op: "label_to_target",
                    lhs: m.shape.clone(),
                    rhs: shape,
                });
            }
            Ok(m.clone())
        }
        _ => Err(CoreError::InvalidArgument(
            "label kind does not match model kind".into(),
        )),
    }
}

fn init_values(n: usize, init: DummyInit, seed: u64, label: &str) -> Vec<f64> {
    let mut r = rng::stream(rng::derive(seed, label), 0);
    match init {
        DummyInit::Normal => rng::normal_vec(&mut r, n, 1.0),
        DummyInit::Uniform => (0..n).map(|_| rand::Rng::gen::<f64>(&mut r)).collect(),
    }
}

fn run_attack<M: DiffModel + ?Sized>(
    model: &M,
    params: &ModelParams,
    target: &GradientVector,
    cfg: &AttackConfig,
    input0: Vec<f64>,
    label: LabelVar,
) -> Result<ReconstructionResult> {
    let input_len = input0.len();
    let (mut x, fixed): (Vec<f64>, Option<Tensor>) = match label {
        LabelVar::Free(logits) => {
            let mut v = input0;
            v.extend_from_slice(&logits);
            (v, None)
        }
        LabelVar::Fixed(t) => (input0, Some(t)),
    };

    let mut closure = |v: &[f64]| -> (f64, Vec<f64>) {
        let (inp, logits) = v.split_at(input_len);
        let logits_opt = if fixed.is_none() { Some(logits) } else { None };
        match grad_of_gradient_objective(
            model,
            params,
            inp,
            logits_opt,
            fixed.as_ref(),
            target,
            cfg.objective,
        ) {
            Ok((loss, grad)) => (loss, grad),
            // Layout errors surface on the first call below; NaNs here mean
            // divergence, which the optimizer reports as NonFinite.
            Err(_) => (f64::NAN, vec![f64::NAN; v.len()]),
        }
    };

    // Surface structural errors (layout mismatch, bad shapes) eagerly.
    let (first_loss, _) = grad_of_gradient_objective(
        model,
        params,
        &x[..input_len],
        if fixed.is_none() { Some(&x[input_len..]) } else { None },
        fixed.as_ref(),
        target,
        cfg.objective,
    )?;

    let mut lbfgs = Lbfgs::new(LbfgsConfig {
        lr: cfg.lr,
        ..LbfgsConfig::default()
    });
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });

    let mut history = Vec::with_capacity(cfg.max_outer_iters);
    let mut best_loss = first_loss;
    let mut best_x = x.clone();
    let mut diverged = false;

    for _outer in 0..cfg.max_outer_iters {
        let step = match cfg.optimizer {
            AttackOptimizer::Lbfgs => lbfgs.run(&mut closure, &mut x, cfg.lbfgs_max_inner),
            AttackOptimizer::Adam => adam.run(&mut closure, &mut x, cfg.lbfgs_max_inner),
        };
        match step {
            Ok(loss) => {
                history.push(loss);
                if loss < best_loss {
                    best_loss = loss;
                    best_x.copy_from_slice(&x);
                }
                if loss < cfg.early_stop_loss {
                    break;
                }
            }
            Err(CoreError::NonFinite { .. }) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    if history.is_empty() {
        history.push(first_loss);
    }

    let dummy_input = Tensor::new(model.input_shape(), best_x[..input_len].to_vec())?;
    let dummy_label = match &fixed {
        Some(t) => t.clone(),
        None => relax_label(model, &best_x[input_len..])?,
    };
    Ok(ReconstructionResult {
        dummy_input,
        dummy_label,
        final_grad_match_loss: best_loss,
        history,
        mse_to_truth: None,
        psnr_to_truth: None,
        diverged,
    })
}

fn relax_label<M: DiffModel + ?Sized>(model: &M, logits: &[f64]) -> Result<Tensor> {
    let mut g = Graph::new();
    match model.label_relaxation() {
        LabelRelaxation::Softmax { classes } => {
            let leaf = g.leaf(Tensor::new(vec![1, classes], logits.to_vec())?);
            let sm = nn::softmax_rows(&mut g, leaf)?;
            Ok(g.value(sm).clone())
        }
        LabelRelaxation::Sigmoid { shape } => {
            let leaf = g.leaf(Tensor::new(shape, logits.to_vec())?);
            let s = g.sigmoid(leaf);
            Ok(g.value(s).clone())
        }
    }
}

/// Mean squared error between two same-shaped tensors.
pub fn mse_image(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape != b.shape {
        return Err(CoreError::ShapeMismatch {
            op: "mse_image",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let n = a.len().max(1) as f64;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio in dB; identical tensors return the sentinel.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    let mse = mse_image(a, b)?;
    if mse == 0.0 {
        return Ok(PSNR_SENTINEL);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_SENTINEL))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd;
    use crate::models::{compute_gradient_soft, LogisticModel};
    use crate::rng;

    fn logistic_setup(seed: u64) -> (LogisticModel, ModelParams, Tensor, Tensor, GradientVector) {
        let model = LogisticModel { dim: 2 };
        let layout = std::sync::Arc::new(model.param_layout());
        let mut r = rng::seeded(seed);
        let params = ModelParams {
            values: rng::normal_vec(&mut r, 3, 0.5),
            layout,
        };
        let x_true = Tensor::from_vec(vec![0.7, -0.4]);
        let y_true = Tensor::from_vec(vec![1.0]);
        let (_, grad) = compute_gradient_soft(&model, &params, &x_true, &y_true).unwrap();
        (model, params, x_true, y_true, grad)
    }

    #[test]
    fn psnr_formula_cases() {
        let a = Tensor::from_vec(vec![0.2, 0.4]);
        let b = Tensor::from_vec(vec![0.3, 0.5]);
        assert!((mse_image(&a, &b).unwrap() - 0.01).abs() < 1e-15);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_SENTINEL);
        let c = Tensor::from_vec(vec![0.0]);
        assert!(psnr(&a, &c, 1.0).is_err());
    }

    #[test]
    fn outer_gradient_matches_finite_differences() {
        let (model, params, _, y_true, grad) = logistic_setup(3);
        let dummy = vec![0.1, 0.2];
        let (_, outer) = grad_of_gradient_objective(
            &model,
            &params,
            &dummy,
            None,
            Some(&y_true),
            &grad,
            AttackObjective::Sse,
        )
        .unwrap();

        let f = |v: &[f64]| {
            grad_of_gradient_objective(
                &model,
                &params,
                v,
                None,
                Some(&y_true),
                &grad,
                AttackObjective::Sse,
            )
            .unwrap()
            .0
        };
        let fd_grad = fd::gradient(f, &dummy, 1e-5);
        let err = fd::max_rel_err(&outer, &fd_grad, 1e-6);
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn fixed_point_has_zero_loss() {
        let (model, params, x_true, y_true, grad) = logistic_setup(5);
        let (loss, outer) = grad_of_gradient_objective(
            &model,
            &params,
            &x_true.data,
            None,
            Some(&y_true),
            &grad,
            AttackObjective::Sse,
        )
        .unwrap();
        assert!(loss < 1e-12, "loss {loss}");
        assert!(outer.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn neg_cosine_scale_invariant() {
        let (model, params, x_true, y_true, grad) = logistic_setup(6);
        // Target scaled by 3 per entry: cosine still 1, objective 0.
        let scaled = GradientVector {
            values: grad.values.iter().map(|v| 3.0 * v).collect(),
            layout: grad.layout.clone(),
        };
        let (loss, _) = grad_of_gradient_objective(
            &model,
            &params,
            &x_true.data,
            None,
            Some(&y_true),
            &scaled,
            AttackObjective::NegCosine,
        )
        .unwrap();
        assert!(loss.abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn logistic_input_recovered() {
        let (model, params, x_true, y_true, grad) = logistic_setup(7);
        let cfg = AttackConfig {
            max_outer_iters: 50,
            lbfgs_max_inner: 20,
            early_stop_loss: 1e-24,
            ..AttackConfig::default()
        };
        let res = dlg_input_only(&model, &params, &grad, y_true, &cfg).unwrap();
        assert!(res.final_grad_match_loss < 1e-8, "loss {}", res.final_grad_match_loss);
        let err = res.dummy_input.max_abs_diff(&x_true);
        assert!(err < 1e-3, "input error {err}");
        // Analytic outer-product oracle: x = grad_w / grad_b.
        let gb = grad.values[2];
        let oracle = [grad.values[0] / gb, grad.values[1] / gb];
        assert!((oracle[0] - x_true.data[0]).abs() < 1e-12);
        assert!((oracle[1] - x_true.data[1]).abs() < 1e-12);
    }

    #[test]
    fn both_optimizers_solve_logistic() {
        let (model, params, _, y_true, grad) = logistic_setup(9);
        for optimizer in [AttackOptimizer::Lbfgs, AttackOptimizer::Adam] {
            let cfg = AttackConfig {
                optimizer,
                lr: if optimizer == AttackOptimizer::Adam { 0.05 } else { 1.0 },
                max_outer_iters: if optimizer == AttackOptimizer::Adam { 300 } else { 50 },
                lbfgs_max_inner: 20,
                early_stop_loss: 1e-9,
                ..AttackConfig::default()
            };
            let res = dlg_input_only(&model, &params, &grad, y_true.clone(), &cfg).unwrap();
            assert!(
                res.final_grad_match_loss < 1e-6,
                "{optimizer:?}: loss {}",
                res.final_grad_match_loss
            );
        }
    }

    #[test]
    fn warm_start_at_truth_stays_at_zero() {
        let (model, params, x_true, y_true, grad) = logistic_setup(11);
        let cfg = AttackConfig {
            max_outer_iters: 3,
            ..AttackConfig::default()
        };
        let res = dlg_input_only_from(
            &model,
            &params,
            &grad,
            y_true,
            x_true.data.clone(),
            &cfg,
        )
        .unwrap();
        assert!(res.final_grad_match_loss < 1e-12);
        assert_eq!(
            res.final_grad_match_loss,
            res.history.iter().cloned().fold(f64::INFINITY, f64::min)
        );
    }

    #[test]
    fn best_so_far_is_min_of_history() {
        let (model, params, _, y_true, grad) = logistic_setup(13);
        let cfg = AttackConfig {
            optimizer: AttackOptimizer::Adam,
            lr: 0.2,
            max_outer_iters: 40,
            lbfgs_max_inner: 5,
            early_stop_loss: 0.0,
            ..AttackConfig::default()
        };
        let res = dlg_input_only(&model, &params, &grad, y_true, &cfg).unwrap();
        let min = res.history.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((res.final_grad_match_loss - min).abs() <= f64::EPSILON * min.abs().max(1.0));
    }

    #[test]
    fn layout_mismatch_rejected() {
        let (model, params, _, y_true, _) = logistic_setup(15);
        let other = LogisticModel { dim: 3 };
        let other_layout = std::sync::Arc::new(other.param_layout());
        let bad = GradientVector {
            values: vec![0.0; 4],
            layout: other_layout,
        };
        let err = grad_of_gradient_objective(
            &model,
            &params,
            &[0.0, 0.0],
            None,
            Some(&y_true),
            &bad,
            AttackObjective::Sse,
        );
        assert!(matches!(err, Err(CoreError::LayoutMismatch(_))));
    }
}
