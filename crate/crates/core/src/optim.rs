//! Optimizers driving the gradient inversion attack: L-BFGS with a strong
//! Wolfe line search, and Adam as the fallback first-order method.

use std::collections::VecDeque;

use crate::error::{CoreError, Result};

/// Objective returning (loss, gradient) at a point.
pub type Objective<'a> = dyn FnMut(&[f64]) -> (f64, Vec<f64>) + 'a;

#[derive(Clone, Debug)]
pub struct LbfgsConfig {
    /// Initial trial step length fed to the line search.
    pub lr: f64,
    /// Number of (s, y) pairs kept for the two-loop recursion.
    pub history: usize,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            lr: 1.0,
            history: 10,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 20,
        }
    }
}

pub struct Lbfgs {
    cfg: LbfgsConfig,
    s: VecDeque<Vec<f64>>,
    y: VecDeque<Vec<f64>>,
    rho: VecDeque<f64>,
    state: Option<(Vec<f64>, f64, Vec<f64>)>, // x, f, grad from last iteration
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v.abs()).fold(0.0, f64::max)
}

fn finite(f: f64, g: &[f64]) -> bool {
    f.is_finite() && g.iter().all(|v| v.is_finite())
}

impl Lbfgs {
    pub fn new(cfg: LbfgsConfig) -> Self {
        Self {
            cfg,
            s: VecDeque::new(),
            y: VecDeque::new(),
            rho: VecDeque::new(),
            state: None,
        }
    }

    /// Runs up to `iters` L-BFGS iterations in place, carrying curvature
    /// history across calls. Returns the latest loss. Fails with `NonFinite`
    /// if the objective or its gradient stops being finite.
    pub fn run(&mut self, f: &mut Objective, x: &mut Vec<f64>, iters: usize) -> Result<f64> {
        let (mut fx, mut gx) = match self.state.take() {
            Some((sx, sf, sg)) if sx == *x => (sf, sg),
            _ => {
                let (fx, gx) = f(x);
                if !finite(fx, &gx) {
                    return Err(CoreError::NonFinite { iter: 0 });
                }
                (fx, gx)
            }
        };

        for iter in 0..iters {
            if inf_norm(&gx) < 1e-13 {
                break;
            }
            let mut d = self.direction(&gx);
            let mut d0 = dot(&d, &gx);
            if !(d0 < 0.0) {
                // Not a descent direction; drop stale curvature and restart.
                self.s.clear();
                self.y.clear();
                self.rho.clear();
                d = gx.iter().map(|v| -v).collect();
                d0 = dot(&d, &gx);
                if !(d0 < 0.0) {
                    break;
                }
            }

            let (alpha, f_new, g_new) = self.strong_wolfe(f, x, fx, &gx, &d, d0, iter)?;
            if alpha == 0.0 {
                break;
            }
            let mut s_vec = vec![0.0; x.len()];
            for i in 0..x.len() {
                s_vec[i] = alpha * d[i];
                x[i] += s_vec[i];
            }
            let y_vec: Vec<f64> = g_new.iter().zip(&gx).map(|(a, b)| a - b).collect();
            let sy = dot(&s_vec, &y_vec);
            if sy > 1e-16 {
                if self.s.len() == self.cfg.history {
                    self.s.pop_front();
                    self.y.pop_front();
                    self.rho.pop_front();
                }
                self.rho.push_back(1.0 / sy);
                self.s.push_back(s_vec);
                self.y.push_back(y_vec);
            }
            fx = f_new;
            gx = g_new;
        }
        self.state = Some((x.clone(), fx, gx));
        Ok(fx)
    }

    /// Two-loop recursion for -H * grad.
    fn direction(&self, grad: &[f64]) -> Vec<f64> {
        let mut q = grad.to_vec();
        let k = self.s.len();
        let mut alphas = vec![0.0; k];
        for i in (0..k).rev() {
            let a = self.rho[i] * dot(&self.s[i], &q);
            alphas[i] = a;
            for (qj, yj) in q.iter_mut().zip(&self.y[i]) {
                *qj -= a * yj;
            }
        }
        if k > 0 {
            let gamma = dot(&self.s[k - 1], &self.y[k - 1]) / dot(&self.y[k - 1], &self.y[k - 1]);
            if gamma.is_finite() && gamma > 0.0 {
                for qj in q.iter_mut() {
                    *qj *= gamma;
                }
            }
        }
        for i in 0..k {
            let beta = self.rho[i] * dot(&self.y[i], &q);
            for (qj, sj) in q.iter_mut().zip(&self.s[i]) {
                *qj += (alphas[i] - beta) * sj;
            }
        }
        q.iter().map(|v| -v).collect()
    }

    /// Strong Wolfe search along `d` (Nocedal-Wright bracket and zoom).
    /// Returns (step, f(x+step d), grad(x+step d)).
    #[allow(clippy::too_many_arguments)]
    fn strong_wolfe(
        &self,
        f: &mut Objective,
        x: &[f64],
        f0: f64,
        _g0: &[f64],
        d: &[f64],
        d0: f64,
        iter: usize,
    ) -> Result<(f64, f64, Vec<f64>)> {
        let (c1, c2) = (self.cfg.c1, self.cfg.c2);
        let eval = |f: &mut Objective, alpha: f64| -> Result<(f64, Vec<f64>, f64)> {
            let probe: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect();
            let (fv, gv) = f(&probe);
            if !finite(fv, &gv) {
                return Err(CoreError::NonFinite { iter });
            }
            let slope = dot(&gv, d);
            Ok((fv, gv, slope))
        };

        let mut alpha_prev = 0.0;
        let mut f_prev = f0;
        let mut alpha = self.cfg.lr;
        let mut bracket: Option<(f64, f64, f64, f64)> = None; // (lo, f_lo, hi, f_hi)
        let mut best = (0.0, f0, Vec::new());

        for i in 0..self.cfg.max_line_search {
            let (fv, gv, slope) = eval(f, alpha)?;
            if fv < best.1 {
                best = (alpha, fv, gv.clone());
            }
            if fv > f0 + c1 * alpha * d0 || (i > 0 && fv >= f_prev) {
                bracket = Some((alpha_prev, f_prev, alpha, fv));
                break;
            }
            if slope.abs() <= -c2 * d0 {
                return Ok((alpha, fv, gv));
            }
            if slope >= 0.0 {
                bracket = Some((alpha, fv, alpha_prev, f_prev));
                break;
            }
            alpha_prev = alpha;
            f_prev = fv;
            alpha *= 2.0;
        }

        let (mut lo, mut f_lo, mut hi, mut f_hi) = match bracket {
            Some(b) => b,
            None => {
                // Never bracketed: fall back to the best point seen, if any.
                return if best.0 > 0.0 {
                    Ok(best)
                } else {
                    Ok((0.0, f0, Vec::new()))
                };
            }
        };

        for _ in 0..self.cfg.max_line_search {
            let mid = 0.5 * (lo + hi);
            if (hi - lo).abs() < 1e-16 * (1.0 + lo.abs()) {
                break;
            }
            let (fv, gv, slope) = eval(f, mid)?;
            if fv < best.1 {
                best = (mid, fv, gv.clone());
            }
            if fv > f0 + c1 * mid * d0 || fv >= f_lo {
                hi = mid;
                f_hi = fv;
            } else {
                if slope.abs() <= -c2 * d0 {
                    return Ok((mid, fv, gv));
                }
                if slope * (hi - lo) >= 0.0 {
                    hi = lo;
                    f_hi = f_lo;
                }
                lo = mid;
                f_lo = fv;
            }
            let _ = f_hi;
        }

        if best.0 > 0.0 && best.1 < f0 {
            Ok(best)
        } else {
            Ok((0.0, f0, Vec::new()))
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Runs `iters` Adam steps in place; returns the latest loss.
    pub fn run(&mut self, f: &mut Objective, x: &mut Vec<f64>, iters: usize) -> Result<f64> {
        if self.m.len() != x.len() {
            self.m = vec![0.0; x.len()];
            self.v = vec![0.0; x.len()];
        }
        let mut last = f64::INFINITY;
        for _ in 0..iters {
            let (fx, gx) = f(x);
            if !finite(fx, &gx) {
                return Err(CoreError::NonFinite {
                    iter: self.t as usize,
                });
            }
            last = fx;
            self.t += 1;
            let b1t = 1.0 - self.cfg.beta1.powi(self.t as i32);
            let b2t = 1.0 - self.cfg.beta2.powi(self.t as i32);
            for i in 0..x.len() {
                self.m[i] = self.cfg.beta1 * self.m[i] + (1.0 - self.cfg.beta1) * gx[i];
                self.v[i] = self.cfg.beta2 * self.v[i] + (1.0 - self.cfg.beta2) * gx[i] * gx[i];
                let mhat = self.m[i] / b1t;
                let vhat = self.v[i] / b2t;
                x[i] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(last)
    }
}
