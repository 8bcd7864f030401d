//! Shared binary container for checkpoints and adapter files.
//!
//! ```text
//! magic[4] | version u16 LE | header_len u32 LE | JSON header | f32 LE tensor data
//! ```
//!
//! The header is a JSON object with a `tensors` array of
//! `{name, shape, offset}`; offsets count bytes from the start of the data
//! section and tensors are laid out back to back in index order.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u16 = 1;
const PREAMBLE: usize = 4 + 2 + 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f32],
}

pub fn encode(
    magic: &[u8; 4],
    mut header: Map<String, Value>,
    tensors: &[TensorRef<'_>],
) -> Vec<u8> {
    let mut offset = 0;
    let mut index = Vec::with_capacity(tensors.len());
    for t in tensors {
        debug_assert_eq!(t.shape.iter().product::<usize>(), t.data.len());
        index.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset,
        });
        offset += t.data.len() * 4;
    }
    header.insert("tensors".into(), serde_json::to_value(index).unwrap());
    let json = serde_json::to_vec(&Value::Object(header)).unwrap();

    let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for v in t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub struct Decoded {
    pub header: Map<String, Value>,
    pub tensors: Vec<(TensorEntry, Vec<f32>)>,
}

impl Decoded {
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let pos = self
            .tensors
            .iter()
            .position(|(e, _)| e.name == name)
            .ok_or_else(|| Error::format(0, format!("missing tensor {name}")))?;
        let (entry, data) = self.tensors.swap_remove(pos);
        if entry.shape != shape {
            return Err(Error::format(
                entry.offset,
                format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    entry.shape
                ),
            ));
        }
        Ok(data)
    }

    pub fn field<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .header
            .get(key)
            .ok_or_else(|| Error::format(PREAMBLE, format!("header lacks `{key}`")))?;
        serde_json::from_value(v.clone())
            .map_err(|e| Error::format(PREAMBLE, format!("header field `{key}`: {e}")))
    }
}

pub fn decode(bytes: &[u8], magic: &[u8; 4]) -> Result<Decoded> {
    if bytes.len() < PREAMBLE {
        return Err(Error::format(
            bytes.len(),
            "file shorter than the fixed preamble",
        ));
    }
    if &bytes[..4] != magic {
        return Err(Error::format(
            0,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let data_start = PREAMBLE
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::format(6, format!("header length {header_len} overruns file")))?;
    let header: Value = serde_json::from_slice(&bytes[PREAMBLE..data_start]).map_err(|e| {
        Error::format(
            PREAMBLE + e.column().saturating_sub(1),
            format!("header JSON: {e}"),
        )
    })?;
    let Value::Object(header) = header else {
        return Err(Error::format(PREAMBLE, "header is not a JSON object"));
    };
    let index: Vec<TensorEntry> = header
        .get("tensors")
        .cloned()
        .ok_or_else(|| Error::format(PREAMBLE, "header lacks a tensor index"))
        .and_then(|v| {
            serde_json::from_value(v)
                .map_err(|e| Error::format(PREAMBLE, format!("tensor index: {e}")))
        })?;

    let data = &bytes[data_start..];
    let mut expected_offset = 0;
    let mut tensors = Vec::with_capacity(index.len());
    for entry in index {
        let at = data_start + entry.offset;
        if entry.offset != expected_offset {
            return Err(Error::format(
                at,
                format!(
                    "tensor {} starts at {}, expected {expected_offset}",
                    entry.name, entry.offset
                ),
            ));
        }
        let len = entry
            .numel()
            .checked_mul(4)
            .ok_or_else(|| Error::format(at, format!("tensor {} too large", entry.name)))?;
        let end = entry.offset + len;
        if end > data.len() {
            return Err(Error::format(
                data_start + data.len(),
                format!("tensor {} truncated: needs {len} bytes", entry.name),
            ));
        }
        let values = data[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        expected_offset = end;
        tensors.push((entry, values));
    }
    if expected_offset != data.len() {
        return Err(Error::format(
            data_start + expected_offset,
            format!(
                "{} trailing bytes after tensor data",
                data.len() - expected_offset
            ),
        ));
    }
    Ok(Decoded { header, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [-0.5f32];
        let mut h = Map::new();
        h.insert("kind".into(), Value::from("test"));
        encode(
            b"TEST",
            h,
            &[
                TensorRef {
                    name: "a".into(),
                    shape: vec![2, 2],
                    data: &a,
                },
                TensorRef {
                    name: "b".into(),
                    shape: vec![1],
                    data: &b,
                },
            ],
        )
    }

    #[test]
    fn roundtrip() {
        let mut d = decode(&sample(), b"TEST").unwrap();
        assert_eq!(d.field::<String>("kind").unwrap(), "test");
        assert_eq!(d.take("b", &[1]).unwrap(), vec![-0.5]);
        assert_eq!(d.take("a", &[2, 2]).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn errors_carry_offsets() {
        let bytes = sample();
        match decode(&bytes, b"NOPE") {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}", other = other.err()),
        }
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(
            decode(&v, b"TEST"),
            Err(Error::Format { offset: 4, .. })
        ));
        let truncated = &bytes[..bytes.len() - 2];
        assert!(matches!(
            decode(truncated, b"TEST"),
            Err(Error::Format { .. })
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra, b"TEST"), Err(Error::Format { .. })));
        assert!(matches!(
            decode(&bytes[..7], b"TEST"),
            Err(Error::Format { .. })
        ));
    }
}
