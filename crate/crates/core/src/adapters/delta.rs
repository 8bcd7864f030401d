use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{vec_mat, Matrix, Scalar};

/// Rank-`r` update `(alpha / r) · A · B`, kept factored.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankDelta {
    /// `d_model × r`
    pub a: Matrix<f32>,
    /// `r × d_model`
    pub b: Matrix<f32>,
    pub alpha: f32,
}

impl LowRankDelta {
    pub fn new(a: Matrix<f32>, b: Matrix<f32>, alpha: f32) -> Result<Self> {
        let delta = Self { a, b, alpha };
        delta.validate(delta.a.rows())?;
        Ok(delta)
    }

    /// Gaussian factors, used for benchmark adapters with random weights.
    pub fn random(d_model: usize, rank: usize, alpha: f32, std: f32, rng: &mut impl Rng) -> Self {
        let n = Normal::new(0.0f32, std).unwrap();
        Self {
            a: Matrix::from_fn(d_model, rank, |_, _| n.sample(rng)),
            b: Matrix::from_fn(rank, d_model, |_, _| n.sample(rng)),
            alpha,
        }
    }

    /// Training initialisation: small Gaussian `A`, zero `B`, so the adapted
    /// model starts out exactly equal to the base model.
    pub fn init_for_training(d_model: usize, rank: usize, alpha: f32, rng: &mut impl Rng) -> Self {
        let n = Normal::new(0.0f32, 0.02).unwrap();
        Self {
            a: Matrix::from_fn(d_model, rank, |_, _| n.sample(rng)),
            b: Matrix::zeros(rank, d_model),
            alpha,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn d_model(&self) -> usize {
        self.a.rows()
    }

    pub fn scale<T: Scalar>(&self) -> T {
        lora_scale(self.alpha, self.rank())
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        let r = self.a.cols();
        if r == 0 {
            return Err(Error::config("adapter rank must be positive"));
        }
        if r > d_model {
            return Err(Error::config(format!(
                "adapter rank {r} exceeds d_model {d_model}"
            )));
        }
        if self.a.shape() != (d_model, r) || self.b.shape() != (r, d_model) {
            return Err(Error::config(format!(
                "delta factors {:?} and {:?} do not fit d_model {d_model}, rank {r}",
                self.a.shape(),
                self.b.shape()
            )));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::config("alpha must be a positive real"));
        }
        if !self.a.is_finite() || !self.b.is_finite() {
            return Err(Error::config("delta factors contain non-finite values"));
        }
        Ok(())
    }

    /// `(alpha / r) · A · B` as a dense matrix. Only oracles use this; the
    /// projection path never materialises the product.
    pub fn materialize(&self) -> Matrix<f32> {
        let mut dense = self.a.matmul(&self.b).expect("factor shapes validated");
        let s: f32 = self.scale();
        for v in dense.as_mut_slice() {
            *v *= s;
        }
        dense
    }
}

/// The standard LoRA scaling `alpha / r`.
pub fn lora_scale<T: Scalar>(alpha: f32, rank: usize) -> T {
    T::from_f64_lossy(alpha as f64 / rank as f64)
}

/// Adds `scale · (x · A) · B` to `out`, low-rank first. `low` must hold `r`
/// elements and `wide` `d_model`; both are scratch.
pub fn add_low_rank<T: Scalar>(
    x: &[T],
    a: &Matrix<T>,
    b: &Matrix<T>,
    scale: T,
    low: &mut [T],
    wide: &mut [T],
    out: &mut [T],
) {
    vec_mat(x, a, low);
    vec_mat(low, b, wide);
    for (o, &w) in out.iter_mut().zip(wide.iter()) {
        *o = *o + scale * w;
    }
}

/// `x · W + (alpha/r) · (x · A) · B`.
pub fn delta_apply(x: &[f32], w: &Matrix<f32>, delta: &LowRankDelta) -> Result<Vec<f32>> {
    let d = w.rows();
    if x.len() != d || w.cols() != d {
        return Err(Error::config(format!(
            "projection expects a {d}-vector and square weight, got {} and {:?}",
            x.len(),
            w.shape()
        )));
    }
    delta.validate(d)?;
    let mut out = vec![0.0; d];
    vec_mat(x, w, &mut out);
    let mut low = vec![0.0; delta.rank()];
    let mut wide = vec![0.0; d];
    add_low_rank(
        x,
        &delta.a,
        &delta.b,
        delta.scale(),
        &mut low,
        &mut wide,
        &mut out,
    );
    Ok(out)
}
