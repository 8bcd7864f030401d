//! Position-wise and attention kernels shared by inference and training.
//!
//! The trainer instantiates these at f64 for gradient checks and at f32 for
//! runs whose pre-activation states must match the engine bit for bit, so
//! both paths call exactly these functions.

use crate::tensor::{dot, Scalar};

pub const RMS_EPS: f64 = 1e-5;

/// Returns the reciprocal RMS used, which backprop needs.
pub fn rms_norm<T: Scalar>(x: &[T], gain: &[T], out: &mut [T]) -> T {
    let mut ss = T::zero();
    for &v in x {
        ss = ss + v * v;
    }
    let n = T::from_usize(x.len()).unwrap();
    let inv = T::one() / (ss / n + T::from_f64_lossy(RMS_EPS)).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = g * (v * inv);
    }
    inv
}

/// Gradient of [`rms_norm`] with respect to its input; accumulates into `dx`.
pub fn rms_norm_backward<T: Scalar>(x: &[T], gain: &[T], inv: T, dy: &[T], dx: &mut [T]) {
    let n = T::from_usize(x.len()).unwrap();
    let mut proj = T::zero();
    for ((&g, &d), &v) in gain.iter().zip(dy).zip(x) {
        proj = proj + g * d * v;
    }
    let coef = inv * inv * inv * proj / n;
    for (((o, &g), &d), &v) in dx.iter_mut().zip(gain).zip(dy).zip(x) {
        *o = *o + inv * g * d - coef * v;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let k = T::from_f64_lossy(GELU_K);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let k = T::from_f64_lossy(GELU_K);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + three * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// Rotation angle for pair `pair` (dimensions 2·pair, 2·pair+1) at `position`.
pub fn rope_angle(position: usize, pair: usize, d_head: usize, theta: f64) -> f64 {
    let exponent = (2 * pair) as f64 / d_head as f64;
    position as f64 / theta.powf(exponent)
}

pub fn rotate_pair<T: Scalar>(x0: T, x1: T, angle: f64) -> (T, T) {
    let (s, c) = angle.sin_cos();
    let (s, c) = (T::from_f64_lossy(s), T::from_f64_lossy(c));
    (x0 * c - x1 * s, x0 * s + x1 * c)
}

/// Rotates every head slice of `row` in place. `inverse` applies the
/// transpose rotation, which is what backprop needs.
pub fn rope_row<T: Scalar>(
    row: &mut [T],
    d_head: usize,
    position: usize,
    theta: f64,
    inverse: bool,
) {
    for head in row.chunks_exact_mut(d_head) {
        for pair in 0..d_head / 2 {
            let mut angle = rope_angle(position, pair, d_head, theta);
            if inverse {
                angle = -angle;
            }
            let (a, b) = rotate_pair(head[2 * pair], head[2 * pair + 1], angle);
            head[2 * pair] = a;
            head[2 * pair + 1] = b;
        }
    }
}

/// Causal softmax weights of one query head against keys `0..weights.len()`.
///
/// `key(j)` returns the head slice of key `j`. Scores, the running max, the
/// exponent sum and the normalisation all proceed in ascending key order.
pub fn attention_weights<'k, T: Scalar>(
    q: &[T],
    key: impl Fn(usize) -> &'k [T],
    weights: &mut [T],
) {
    let scale = T::one() / T::from_usize(q.len()).unwrap().sqrt();
    let mut max = T::neg_infinity();
    for (j, w) in weights.iter_mut().enumerate() {
        *w = dot(q, key(j)) * scale;
        if *w > max {
            max = *w;
        }
    }
    let mut sum = T::zero();
    for w in weights.iter_mut() {
        *w = (*w - max).exp();
        sum = sum + *w;
    }
    for w in weights.iter_mut() {
        *w = *w / sum;
    }
}

/// `out = Σ_j weights[j] · value(j)`, accumulated over ascending `j`.
pub fn weighted_values<'v, T: Scalar>(
    weights: &[T],
    value: impl Fn(usize) -> &'v [T],
    out: &mut [T],
) {
    out.fill(T::zero());
    for (j, &w) in weights.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(value(j)) {
            *o = *o + w * v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_diff(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = finite_diff(gelu::<f64>, x);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn rms_norm_backward_matches_finite_difference() {
        let x = [0.3f64, -1.2, 0.8, 2.0];
        let g = [1.0f64, 0.5, -0.7, 1.3];
        let dy = [0.2f64, -0.1, 0.4, 0.9];
        let mut y = [0.0; 4];
        let inv = rms_norm(&x, &g, &mut y);
        let mut dx = [0.0; 4];
        rms_norm_backward(&x, &g, inv, &dy, &mut dx);
        for i in 0..4 {
            let f = |v: f64| {
                let mut xp = x;
                xp[i] = v;
                let mut yp = [0.0; 4];
                rms_norm(&xp, &g, &mut yp);
                yp.iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>()
            };
            assert!((finite_diff(f, x[i]) - dx[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn quarter_turn_pair_rotation() {
        let (a, b) = rotate_pair(1.0f32, 0.0, std::f64::consts::FRAC_PI_2);
        assert!(a.abs() < 1e-6 && (b - 1.0).abs() < 1e-6);
    }

    #[test]
    fn inverse_rope_undoes_rope() {
        let orig: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut v = orig.clone();
        rope_row(&mut v, 4, 17, 10_000.0, false);
        rope_row(&mut v, 4, 17, 10_000.0, true);
        for (a, b) in v.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_of_equal_scores_is_uniform() {
        let q = [1.0f32, 2.0];
        let k = [0.5f32, 0.5];
        let mut w = [0.0f32; 4];
        attention_weights(&q, |_| &k[..], &mut w);
        assert!(w.iter().all(|&x| x == 0.25));
    }
}
