use std::path::Path;

use serde_json::Map;

use crate::error::{Error, Result};
use crate::format::{self, TensorRef};
use crate::model::{LayerWeights, ModelConfig, ModelWeights};
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ALRE";

pub fn encode_checkpoint(config: &ModelConfig, weights: &ModelWeights) -> Vec<u8> {
    let mut header = Map::new();
    header.insert("config".into(), serde_json::to_value(config).unwrap());
    fn mat(name: String, m: &Matrix<f32>) -> TensorRef<'_> {
        TensorRef {
            name,
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice(),
        }
    }
    fn vector(name: String, v: &[f32]) -> TensorRef<'_> {
        TensorRef {
            name,
            shape: vec![v.len()],
            data: v,
        }
    }
    let mut tensors = vec![mat("token_embedding".into(), &weights.token_embedding)];
    for (i, l) in weights.layers.iter().enumerate() {
        tensors.push(mat(format!("layer{i}.w_q"), &l.w_q));
        tensors.push(mat(format!("layer{i}.w_k"), &l.w_k));
        tensors.push(mat(format!("layer{i}.w_v"), &l.w_v));
        tensors.push(mat(format!("layer{i}.w_o"), &l.w_o));
        tensors.push(mat(format!("layer{i}.w_up"), &l.w_up));
        tensors.push(mat(format!("layer{i}.w_down"), &l.w_down));
        tensors.push(vector(format!("layer{i}.attn_norm"), &l.attn_norm));
        tensors.push(vector(format!("layer{i}.mlp_norm"), &l.mlp_norm));
    }
    tensors.push(vector("final_norm".into(), &weights.final_norm));
    tensors.push(mat("unembedding".into(), &weights.unembedding));
    format::encode(CHECKPOINT_MAGIC, header, &tensors)
}

/// Decodes and validates a checkpoint.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ModelWeights)> {
    let mut dec = format::decode(bytes, CHECKPOINT_MAGIC)?;
    let config: ModelConfig = dec.field("config")?;
    config
        .validate()
        .map_err(|e| Error::format(0, e.to_string()))?;
    let d = config.d_model;
    let mut mat = |name: String, rows: usize, cols: usize| -> Result<Matrix<f32>> {
        Matrix::new(rows, cols, dec.take(&name, &[rows, cols])?)
    };
    let token_embedding = mat("token_embedding".into(), config.vocab_size, d)?;
    let unembedding = mat("unembedding".into(), d, config.vocab_size)?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        layers.push(LayerWeights {
            w_q: mat(format!("layer{i}.w_q"), d, d)?,
            w_k: mat(format!("layer{i}.w_k"), d, d)?,
            w_v: mat(format!("layer{i}.w_v"), d, d)?,
            w_o: mat(format!("layer{i}.w_o"), d, d)?,
            w_up: mat(format!("layer{i}.w_up"), d, config.d_ff())?,
            w_down: mat(format!("layer{i}.w_down"), config.d_ff(), d)?,
            attn_norm: Vec::new(),
            mlp_norm: Vec::new(),
        });
    }
    for (i, l) in layers.iter_mut().enumerate() {
        l.attn_norm = dec.take(&format!("layer{i}.attn_norm"), &[d])?;
        l.mlp_norm = dec.take(&format!("layer{i}.mlp_norm"), &[d])?;
    }
    let final_norm = dec.take("final_norm", &[d])?;
    if let Some((extra, _)) = dec.tensors.first() {
        return Err(Error::format(
            extra.offset,
            format!("unexpected tensor {}", extra.name),
        ));
    }
    let weights = ModelWeights {
        token_embedding,
        layers,
        final_norm,
        unembedding,
    };
    weights
        .validate(&config)
        .map_err(|e| Error::format(0, e.to_string()))?;
    Ok((config, weights))
}

pub fn save_checkpoint(
    config: &ModelConfig,
    weights: &ModelWeights,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(config, weights)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelWeights)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
