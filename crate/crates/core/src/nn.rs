//! Neural-network forward ops composed from graph primitives.
//!
//! Everything here is a composition of the differentiable primitives in
//! [`crate::graph`], so first- and second-order gradients come from the same
//! machinery with no per-op backward rules to maintain.

use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Clamp floor for logarithm arguments in losses.
pub const LOG_EPS: f64 = 1e-12;

/// Numerically stable row-wise softmax on `[r, c]`.
pub fn softmax_rows(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let cols = expect_2d(g, x, "softmax")?;
    let m = g.row_max(x)?;
    let mb = g.row_broadcast(m, cols)?;
    let z = g.sub(x, mb)?;
    let e = g.exp(z);
    let s = g.row_sum(e)?;
    let r = g.recip(s);
    let rb = g.row_broadcast(r, cols)?;
    g.mul(e, rb)
}

/// Row-wise log-softmax on `[r, c]` via max-subtracted log-sum-exp.
pub fn log_softmax_rows(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let cols = expect_2d(g, x, "log_softmax")?;
    let m = g.row_max(x)?;
    let mb = g.row_broadcast(m, cols)?;
    let z = g.sub(x, mb)?;
    let e = g.exp(z);
    let s = g.row_sum(e)?;
    let ls = g.ln(s);
    let lsb = g.row_broadcast(ls, cols)?;
    g.sub(z, lsb)
}

/// Mean cross-entropy between logit rows and target probability rows.
/// Targets may be one-hot or soft distributions.
pub fn cross_entropy_rows(g: &mut Graph, logits: NodeId, targets: NodeId) -> Result<NodeId> {
    let (sl, st) = (g.shape(logits).to_vec(), g.shape(targets).to_vec());
    if sl != st {
        return Err(CoreError::ShapeMismatch {
            op: "cross_entropy",
            lhs: sl,
            rhs: st,
        });
    }
    let rows = sl[0].max(1);
    let lsm = log_softmax_rows(g, logits)?;
    let prod = g.mul(targets, lsm)?;
    let total = g.sum_all(prod);
    let neg = g.neg(total);
    Ok(g.mul_scalar(neg, 1.0 / rows as f64))
}

/// Mean binary cross-entropy with clamped log arguments. `probs` and
/// `targets` share a shape; targets may be soft.
pub fn binary_cross_entropy(g: &mut Graph, probs: NodeId, targets: NodeId) -> Result<NodeId> {
    let (sp, st) = (g.shape(probs).to_vec(), g.shape(targets).to_vec());
    if sp != st {
        return Err(CoreError::ShapeMismatch {
            op: "binary_cross_entropy",
            lhs: sp,
            rhs: st,
        });
    }
    let n = g.value(probs).len().max(1);
    let p = g.clamp(probs, LOG_EPS, 1.0 - LOG_EPS);
    let lp = g.ln(p);
    let t_lp = g.mul(targets, lp)?;
    let np = g.neg(p);
    let one_minus_p = g.add_scalar(np, 1.0);
    let lq = g.ln(one_minus_p);
    let nt = g.neg(targets);
    let one_minus_t = g.add_scalar(nt, 1.0);
    let u_lq = g.mul(one_minus_t, lq)?;
    let sum = g.add(t_lp, u_lq)?;
    let total = g.sum_all(sum);
    let neg = g.neg(total);
    Ok(g.mul_scalar(neg, 1.0 / n as f64))
}

pub fn dot(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let p = g.mul(a, b)?;
    Ok(g.sum_all(p))
}

/// Sum of squared differences over all elements.
pub fn sse(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    Ok(g.sum_all(sq))
}

/// Cosine similarity of two same-shaped tensors viewed as flat vectors.
/// Norms are floored at 1e-12 to keep the value defined near zero vectors.
pub fn cosine_similarity(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    if sa != sb {
        return Err(CoreError::ShapeMismatch {
            op: "cosine_similarity",
            lhs: sa,
            rhs: sb,
        });
    }
    let num = dot(g, a, b)?;
    let aa = dot(g, a, a)?;
    let bb = dot(g, b, b)?;
    let na = g.sqrt(aa);
    let nb = g.sqrt(bb);
    let prod = g.mul(na, nb)?;
    let floored = g.clamp(prod, 1e-12, f64::MAX);
    let inv = g.recip(floored);
    g.mul(num, inv)
}

/// Output spatial size of a valid, stride-1 convolution.
pub fn conv2d_out_shape(input: &[usize], kernel: &[usize]) -> Result<Vec<usize>> {
    if input.len() != 3 || kernel.len() != 4 {
        return Err(CoreError::ShapeMismatch {
            op: "conv2d",
            lhs: input.to_vec(),
            rhs: kernel.to_vec(),
        });
    }
    let (cin, h, w) = (input[0], input[1], input[2]);
    let (cout, kcin, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
    if cin != kcin || h < kh || w < kw || kh == 0 || kw == 0 {
        return Err(CoreError::ShapeMismatch {
            op: "conv2d",
            lhs: input.to_vec(),
            rhs: kernel.to_vec(),
        });
    }
    Ok(vec![cout, h - kh + 1, w - kw + 1])
}

/// Valid-padding stride-1 convolution of `[Cin,H,W]` with kernel
/// `[Cout,Cin,kh,kw]` and bias `[Cout]`, built as im2col + matmul.
pub fn conv2d(g: &mut Graph, x: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
    let xs = g.shape(x).to_vec();
    let ks = g.shape(kernel).to_vec();
    let out_shape = conv2d_out_shape(&xs, &ks)?;
    let (cin, h, w) = (xs[0], xs[1], xs[2]);
    let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    if g.shape(bias) != [cout] {
        return Err(CoreError::ShapeMismatch {
            op: "conv2d_bias",
            lhs: g.shape(bias).to_vec(),
            rhs: vec![cout],
        });
    }

    // Patch matrix: rows index (cin, ky, kx), columns index (oy, ox).
    let rows = cin * kh * kw;
    let cols = oh * ow;
    let mut idx = Vec::with_capacity(rows * cols);
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                for oy in 0..oh {
                    for ox in 0..ow {
                        idx.push(ci * h * w + (oy + ky) * w + (ox + kx));
                    }
                }
            }
        }
    }
    let patches = g.gather(x, Arc::new(idx), vec![rows, cols])?;
    let kmat = g.reshape(kernel, vec![cout, rows])?;
    let prod = g.matmul(kmat, patches)?;
    let bb = g.row_broadcast(bias, cols)?;
    let with_bias = g.add(prod, bb)?;
    g.reshape(with_bias, out_shape)
}

/// Zero-pads `[C,H,W]` by `p` on each spatial side.
pub fn pad2d(g: &mut Graph, x: NodeId, p: usize) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(CoreError::InvalidShape {
            op: "pad2d",
            shape: s,
            reason: "expects [C,H,W]".into(),
        });
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut idx = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                idx.push(ci * hp * wp + (y + p) * wp + (xx + p));
            }
        }
    }
    g.scatter_add(x, Arc::new(idx), vec![c, hp, wp])
}

/// Stride-2 spatial downsample (top-left of each 2x2 block).
pub fn downsample2(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
        return Err(CoreError::InvalidShape {
            op: "downsample2",
            shape: s,
            reason: "expects [C,H,W] with even H and W".into(),
        });
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                idx.push(ci * h * w + 2 * y * w + 2 * xx);
            }
        }
    }
    g.gather(x, Arc::new(idx), vec![c, oh, ow])
}

/// Nearest-neighbour 2x spatial upsample.
pub fn upsample2(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(CoreError::InvalidShape {
            op: "upsample2",
            shape: s,
            reason: "expects [C,H,W]".into(),
        });
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                idx.push(ci * h * w + (y / 2) * w + (xx / 2));
            }
        }
    }
    g.gather(x, Arc::new(idx), vec![c, oh, ow])
}

/// Channel-wise concat of `[Ca,H,W]` and `[Cb,H,W]`.
pub fn concat_channels(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
        return Err(CoreError::ShapeMismatch {
            op: "concat_channels",
            lhs: sa,
            rhs: sb,
        });
    }
    let shape = vec![sa[0] + sb[0], sa[1], sa[2]];
    g.concat(a, b, shape)
}

/// One-hot row tensor `[1, classes]`.
pub fn one_hot(class: usize, classes: usize) -> Tensor {
    let mut data = vec![0.0; classes];
    data[class] = 1.0;
    Tensor {
        shape: vec![1, classes],
        data,
    }
}

fn expect_2d(g: &Graph, x: NodeId, op: &'static str) -> Result<usize> {
    let s = g.shape(x);
    if s.len() != 2 {
        return Err(CoreError::InvalidShape {
            op: "softmax",
            shape: s.to_vec(),
            reason: format!("{op} expects [rows, cols]"),
        });
    }
    Ok(s[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd;

    #[test]
    fn softmax_uniform_case() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap());
        let s = softmax_rows(&mut g, x).unwrap();
        for v in &g.value(s).data {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_sums_to_one_and_is_stable() {
        let mut g = Graph::new();
        // Max-subtraction must keep huge logits from overflowing exp.
        let x = g
            .leaf(Tensor::new(vec![2, 4], vec![1000.0, 999.0, 998.0, 997.0, -30.0, 0.0, 3.0, -2.0]).unwrap());
        let s = softmax_rows(&mut g, x).unwrap();
        let v = &g.value(s).data;
        assert!(v.iter().all(|p| p.is_finite() && *p > 0.0 && *p < 1.0));
        for r in 0..2 {
            let sum: f64 = v[r * 4..(r + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
        }
    }

    #[test]
    fn conv_of_ones_sums_kernel_window() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(vec![1, 5, 5], 1.0));
        let k = g.leaf(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let b = g.leaf(Tensor::zeros(vec![1]));
        let y = conv2d(&mut g, x, k, b).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 3]);
        // Direct-summation oracle: each output is the sum of a 3x3 window.
        for v in &g.value(y).data {
            assert_eq!(*v, 9.0);
        }
    }

    #[test]
    fn conv_matches_direct_summation_oracle() {
        let mut rng = crate::rng::seeded(11);
        let x_t = Tensor::new(vec![2, 6, 5], crate::rng::normal_vec(&mut rng, 60, 1.0)).unwrap();
        let k_t = Tensor::new(vec![3, 2, 3, 3], crate::rng::normal_vec(&mut rng, 54, 1.0)).unwrap();
        let b_t = Tensor::new(vec![3], crate::rng::normal_vec(&mut rng, 3, 1.0)).unwrap();

        let mut g = Graph::new();
        let x = g.leaf(x_t.clone());
        let k = g.leaf(k_t.clone());
        let b = g.leaf(b_t.clone());
        let y = conv2d(&mut g, x, k, b).unwrap();

        // Naive quadruple-loop oracle.
        let (h, w) = (6, 5);
        let (oh, ow) = (4, 3);
        for co in 0..3 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b_t.data[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                acc += x_t.data[ci * h * w + (oy + ky) * w + (ox + kx)]
                                    * k_t.data[co * 2 * 9 + ci * 9 + ky * 3 + kx];
                            }
                        }
                    }
                    let got = g.value(y).data[co * oh * ow + oy * ow + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let mut rng = crate::rng::seeded(5);
        let x0 = crate::rng::normal_vec(&mut rng, 16, 1.0);
        let k0 = crate::rng::normal_vec(&mut rng, 8, 0.5);

        let run = |xs: &[f64], ks: &[f64]| -> f64 {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(vec![1, 4, 4], xs.to_vec()).unwrap());
            let k = g.leaf(Tensor::new(vec![2, 1, 2, 2], ks.to_vec()).unwrap());
            let b = g.leaf(Tensor::zeros(vec![2]));
            let y = conv2d(&mut g, x, k, b).unwrap();
            let act = g.sigmoid(y);
            let s = g.sum_all(act);
            g.value(s).scalar_value()
        };

        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 4, 4], x0.clone()).unwrap());
        let k = g.leaf(Tensor::new(vec![2, 1, 2, 2], k0.clone()).unwrap());
        let b = g.leaf(Tensor::zeros(vec![2]));
        let y = conv2d(&mut g, x, k, b).unwrap();
        let act = g.sigmoid(y);
        let s = g.sum_all(act);
        let grads = g.backward(s, &[x, k]).unwrap();

        let fd_x = fd::gradient(|v| run(v, &k0), &x0, 1e-6);
        let fd_k = fd::gradient(|v| run(&x0, v), &k0, 1e-6);
        assert!(fd::max_rel_err(&g.value(grads[0]).data, &fd_x, 1e-6) < 1e-6);
        assert!(fd::max_rel_err(&g.value(grads[1]).data, &fd_k, 1e-6) < 1e-6);
    }

    #[test]
    fn bce_handles_saturated_probs() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::from_vec(vec![0.0, 1.0, 0.5]));
        let t = g.leaf(Tensor::from_vec(vec![0.0, 1.0, 1.0]));
        let loss = binary_cross_entropy(&mut g, p, t).unwrap();
        assert!(g.value(loss).scalar_value().is_finite());
    }

    #[test]
    fn cosine_of_scaled_vector_is_one() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(vec![1.0, -2.0, 0.5]));
        let b = g.leaf(Tensor::from_vec(vec![3.0, -6.0, 1.5]));
        let c = cosine_similarity(&mut g, a, b).unwrap();
        assert!((g.value(c).scalar_value() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn upsample_then_downsample_is_identity() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let up = upsample2(&mut g, x).unwrap();
        assert_eq!(g.shape(up), &[1, 4, 4]);
        let down = downsample2(&mut g, up).unwrap();
        assert_eq!(g.value(down).data, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pad_places_values_in_interior() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 1, 1], vec![7.0]).unwrap());
        let p = pad2d(&mut g, x, 1).unwrap();
        assert_eq!(g.shape(p), &[1, 3, 3]);
        assert_eq!(g.value(p).data[4], 7.0);
        assert_eq!(g.value(p).data.iter().sum::<f64>(), 7.0);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]));
        let b = g.leaf(Tensor::zeros(vec![3, 3]));
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 3]"), "{msg}");
    }
}
