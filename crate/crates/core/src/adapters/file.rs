use std::path::Path;

use serde_json::{Map, Value};

use crate::adapters::{AdapterId, AdapterMode, AdapterSpec, LayerDeltas, LowRankDelta, Projection};
use crate::error::{Error, Result};
use crate::format::{self, TensorRef};
use crate::tensor::Matrix;
use crate::TokenId;

pub const ADAPTER_MAGIC: &[u8; 4] = b"ALAD";

pub fn encode_adapter(spec: &AdapterSpec) -> Vec<u8> {
    let d_model = spec
        .layers
        .iter()
        .flat_map(|l| l.deltas.iter().flatten())
        .map(|d| d.d_model())
        .next()
        .unwrap_or(0);
    let mut header = Map::new();
    header.insert("adapter_id".into(), Value::from(spec.id.0));
    header.insert("mode".into(), serde_json::to_value(spec.mode).unwrap());
    header.insert("alpha".into(), Value::from(spec.alpha));
    header.insert("r".into(), Value::from(spec.rank));
    header.insert(
        "targets".into(),
        serde_json::to_value(&spec.targets).unwrap(),
    );
    header.insert(
        "invocation_sequence".into(),
        serde_json::to_value(&spec.invocation_sequence).unwrap(),
    );
    header.insert("max_new_tokens".into(), Value::from(spec.max_new_tokens));
    header.insert("n_layers".into(), Value::from(spec.layers.len()));
    header.insert("d_model".into(), Value::from(d_model));

    let mut tensors = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        for p in Projection::ALL {
            if let Some(d) = layer.get(p) {
                tensors.push(TensorRef {
                    name: format!("layer{i}.{}.A", p.name()),
                    shape: vec![d.a.rows(), d.a.cols()],
                    data: d.a.as_slice(),
                });
                tensors.push(TensorRef {
                    name: format!("layer{i}.{}.B", p.name()),
                    shape: vec![d.b.rows(), d.b.cols()],
                    data: d.b.as_slice(),
                });
            }
        }
    }
    format::encode(ADAPTER_MAGIC, header, &tensors)
}

/// Decodes an adapter file. Structural checks only; [`AdapterSpec::validate`]
/// against a model config happens when the adapter is used.
pub fn decode_adapter(bytes: &[u8]) -> Result<AdapterSpec> {
    let mut dec = format::decode(bytes, ADAPTER_MAGIC)?;
    let id: u32 = dec.field("adapter_id")?;
    let mode: AdapterMode = dec.field("mode")?;
    let alpha: f32 = dec.field("alpha")?;
    let rank: usize = dec.field("r")?;
    let mut targets: Vec<Projection> = dec.field("targets")?;
    targets.sort();
    targets.dedup();
    let invocation_sequence: Vec<TokenId> = dec.field("invocation_sequence")?;
    let max_new_tokens: usize = dec.field("max_new_tokens")?;
    let n_layers: usize = dec.field("n_layers")?;
    let d_model: usize = dec.field("d_model")?;
    if rank == 0 || rank > d_model {
        return Err(Error::format(
            0,
            format!("rank {rank} outside 1..={d_model} for d_model {d_model}"),
        ));
    }
    if mode == AdapterMode::Alora && invocation_sequence.is_empty() {
        return Err(Error::format(
            0,
            "activated adapter without invocation sequence",
        ));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let mut ld = LayerDeltas::default();
        for &p in &targets {
            let a = dec.take(&format!("layer{i}.{}.A", p.name()), &[d_model, rank])?;
            let b = dec.take(&format!("layer{i}.{}.B", p.name()), &[rank, d_model])?;
            let delta = LowRankDelta::new(
                Matrix::new(d_model, rank, a)?,
                Matrix::new(rank, d_model, b)?,
                alpha,
            )
            .map_err(|e| Error::format(0, e.to_string()))?;
            ld.deltas[p.index()] = Some(delta);
        }
        layers.push(ld);
    }
    if let Some((extra, _)) = dec.tensors.first() {
        return Err(Error::format(
            extra.offset,
            format!("unexpected tensor {}", extra.name),
        ));
    }
    Ok(AdapterSpec {
        id: AdapterId(id),
        mode,
        rank,
        alpha,
        targets,
        layers,
        invocation_sequence,
        max_new_tokens,
    })
}

pub fn save_adapter(spec: &AdapterSpec, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_adapter(spec)).map_err(|e| Error::io(path, e))
}

pub fn load_adapter(path: impl AsRef<Path>) -> Result<AdapterSpec> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_adapter(&bytes)
}
