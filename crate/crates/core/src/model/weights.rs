use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{Matrix, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T = f32> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    pub w_o: Matrix<T>,
    pub w_up: Matrix<T>,
    pub w_down: Matrix<T>,
    pub attn_norm: Vec<T>,
    pub mlp_norm: Vec<T>,
}

/// Dense weights of the toy model. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T = f32> {
    pub token_embedding: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Vec<T>,
    pub unembedding: Matrix<T>,
}

pub const INIT_STD: f64 = 0.02;

impl ModelWeights<f32> {
    /// Gaussian initialisation with std 0.02, scaled by 1/sqrt(n_layers) on the
    /// matrices that write into the residual stream. Norm gains start at one.
    pub fn random(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let base = Normal::new(0.0f32, INIT_STD as f32).unwrap();
        let resid =
            Normal::new(0.0f32, (INIT_STD / (config.n_layers as f64).sqrt()) as f32).unwrap();
        let mut gauss = |rows: usize, cols: usize, dist: &Normal<f32>| {
            Matrix::from_fn(rows, cols, |_, _| dist.sample(&mut rng))
        };
        let token_embedding = gauss(config.vocab_size, d, &base);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                w_q: gauss(d, d, &base),
                w_k: gauss(d, d, &base),
                w_v: gauss(d, d, &base),
                w_o: gauss(d, d, &resid),
                w_up: gauss(d, config.d_ff(), &base),
                w_down: gauss(config.d_ff(), d, &resid),
                attn_norm: vec![1.0; d],
                mlp_norm: vec![1.0; d],
            });
        }
        let unembedding = gauss(d, config.vocab_size, &base);
        Ok(Self {
            token_embedding,
            layers,
            final_norm: vec![1.0; d],
            unembedding,
        })
    }
}

impl<T: Scalar> ModelWeights<T> {
    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        let cv = |v: &[T]| {
            v.iter()
                .map(|x| U::from_f64_lossy(x.to_f64_lossy()))
                .collect()
        };
        ModelWeights {
            token_embedding: self.token_embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    w_q: l.w_q.cast(),
                    w_k: l.w_k.cast(),
                    w_v: l.w_v.cast(),
                    w_o: l.w_o.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                    attn_norm: cv(&l.attn_norm),
                    mlp_norm: cv(&l.mlp_norm),
                })
                .collect(),
            final_norm: cv(&self.final_norm),
            unembedding: self.unembedding.cast(),
        }
    }

    /// Checks shapes against `config` and that every value is finite.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        let d = config.d_model;
        let expect = |name: &str, m: &Matrix<T>, rows: usize, cols: usize| -> Result<()> {
            if m.shape() != (rows, cols) {
                return Err(Error::config(format!(
                    "{name} has shape {:?}, expected ({rows}, {cols})",
                    m.shape()
                )));
            }
            if !m.is_finite() {
                return Err(Error::config(format!("{name} contains non-finite values")));
            }
            Ok(())
        };
        let expect_vec = |name: &str, v: &[T]| -> Result<()> {
            if v.len() != d || !v.iter().all(|x| x.is_finite()) {
                return Err(Error::config(format!("{name} must be {d} finite values")));
            }
            Ok(())
        };
        expect(
            "token_embedding",
            &self.token_embedding,
            config.vocab_size,
            d,
        )?;
        expect("unembedding", &self.unembedding, d, config.vocab_size)?;
        expect_vec("final_norm", &self.final_norm)?;
        if self.layers.len() != config.n_layers {
            return Err(Error::config(format!(
                "{} layers present, config says {}",
                self.layers.len(),
                config.n_layers
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            expect(&format!("layer{i}.w_q"), &l.w_q, d, d)?;
            expect(&format!("layer{i}.w_k"), &l.w_k, d, d)?;
            expect(&format!("layer{i}.w_v"), &l.w_v, d, d)?;
            expect(&format!("layer{i}.w_o"), &l.w_o, d, d)?;
            expect(&format!("layer{i}.w_up"), &l.w_up, d, config.d_ff())?;
            expect(&format!("layer{i}.w_down"), &l.w_down, config.d_ff(), d)?;
            expect_vec(&format!("layer{i}.attn_norm"), &l.attn_norm)?;
            expect_vec(&format!("layer{i}.mlp_norm"), &l.mlp_norm)?;
        }
        Ok(())
    }
}

impl LayerWeights<f32> {
    pub fn projection(&self, which: crate::adapters::Projection) -> &Matrix<f32> {
        use crate::adapters::Projection::*;
        match which {
            Q => &self.w_q,
            K => &self.w_k,
            V => &self.w_v,
        }
    }
}
