//! Central finite differences, used as the independent oracle for gradient
//! checks. Deliberately knows nothing about the graph engine.

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Worst relative error between `got` and `want`, with an absolute floor so
/// near-zero entries compare absolutely.
pub fn max_rel_err(got: &[f64], want: &[f64], floor: f64) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter()
        .zip(want)
        .map(|(g, w)| (g - w).abs() / w.abs().max(floor))
        .fold(0.0, f64::max)
}
