//! Per-layer key/value storage with per-position provenance.
//!
//! A cache is a list of sealed, immutable chunks followed by an open tail.
//! Forking shares sealed chunks through `Arc`, so a fork aliases its parent's
//! rows and only pays for the positions it appends itself.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::adapters::AdapterId;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::TokenId;

/// Which weights produced a cached position's rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    Base,
    Adapter(AdapterId),
}

impl Provenance {
    /// Base rows serve every consumer; adapter rows serve only that adapter.
    pub fn reusable_by(self, consumer: Provenance) -> bool {
        match self {
            Provenance::Base => true,
            Provenance::Adapter(_) => self == consumer,
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Base => f.write_str("base"),
            Provenance::Adapter(id) => write!(f, "{id}"),
        }
    }
}

#[derive(Debug)]
struct Chunk {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    provenance: Vec<Provenance>,
    tokens: Vec<TokenId>,
}

impl Chunk {
    fn len(&self) -> usize {
        self.provenance.len()
    }
}

#[derive(Clone, Debug)]
struct ChunkRef {
    chunk: Arc<Chunk>,
    /// Positions of `chunk` visible to this cache.
    len: usize,
    /// Whether this cache created the chunk (and so pays for it).
    owned: bool,
}

#[derive(Clone, Debug)]
pub struct CacheStore {
    n_layers: usize,
    d_model: usize,
    sealed: Vec<ChunkRef>,
    sealed_length: usize,
    tail_keys: Vec<Vec<f32>>,
    tail_values: Vec<Vec<f32>>,
    tail_provenance: Vec<Provenance>,
    tail_tokens: Vec<TokenId>,
}

/// Borrowed key/value rows of one layer, indexed by absolute position.
pub struct LayerView<'a> {
    pub keys: Vec<&'a [f32]>,
    pub values: Vec<&'a [f32]>,
}

impl CacheStore {
    pub fn new(config: &ModelConfig) -> Self {
        Self::with_dims(config.n_layers, config.d_model)
    }

    pub fn with_dims(n_layers: usize, d_model: usize) -> Self {
        Self {
            n_layers,
            d_model,
            sealed: Vec::new(),
            sealed_length: 0,
            tail_keys: vec![Vec::new(); n_layers],
            tail_values: vec![Vec::new(); n_layers],
            tail_provenance: Vec::new(),
            tail_tokens: Vec::new(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// Number of positions with recorded provenance.
    pub fn len(&self) -> usize {
        self.sealed_length + self.tail_provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sealed_length(&self) -> usize {
        self.sealed_length
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed_length == self.len()
    }

    /// Number of positions stored at `layer`.
    pub fn layer_len(&self, layer: usize) -> usize {
        self.sealed_length + self.tail_keys[layer].len() / self.d_model
    }

    pub fn row_bytes(&self) -> u64 {
        (self.n_layers * 2 * self.d_model * 4) as u64
    }

    pub fn provenance(&self) -> Vec<Provenance> {
        self.sealed
            .iter()
            .flat_map(|c| c.chunk.provenance[..c.len].iter().copied())
            .chain(self.tail_provenance.iter().copied())
            .collect()
    }

    pub fn token_ids(&self) -> Vec<TokenId> {
        self.sealed
            .iter()
            .flat_map(|c| c.chunk.tokens[..c.len].iter().copied())
            .chain(self.tail_tokens.iter().copied())
            .collect()
    }

    pub fn last_provenance(&self) -> Option<Provenance> {
        self.tail_provenance
            .last()
            .copied()
            .or_else(|| self.sealed.last().map(|c| c.chunk.provenance[c.len - 1]))
    }

    /// Records the token ids for the next positions.
    pub fn append_tokens(&mut self, tokens: &[TokenId]) {
        self.tail_tokens.extend_from_slice(tokens);
    }

    /// Appends rows (each `d_model` wide, flattened) to one layer. Layer 0
    /// records `provenance` for the new positions; deeper layers must match
    /// what layer 0 recorded.
    pub fn append_rows(
        &mut self,
        layer: usize,
        keys: &[f32],
        values: &[f32],
        provenance: &[Provenance],
    ) -> Result<()> {
        if layer >= self.n_layers {
            return Err(Error::contract(format!(
                "layer {layer} out of range for {} layers",
                self.n_layers
            )));
        }
        let d = self.d_model;
        if keys.len() != values.len()
            || !keys.len().is_multiple_of(d)
            || keys.len() / d != provenance.len()
        {
            return Err(Error::contract(format!(
                "append of {} key and {} value elements for {} positions at width {d}",
                keys.len(),
                values.len(),
                provenance.len()
            )));
        }
        if provenance.is_empty() {
            return Ok(());
        }
        let start = self.layer_len(layer);
        if layer == 0 {
            if start != self.len() {
                return Err(Error::contract("layer 0 lags its own provenance list"));
            }
            let mut prev = self.last_provenance();
            for (i, &p) in provenance.iter().enumerate() {
                if let Some(Provenance::Adapter(a)) = prev {
                    if p != Provenance::Adapter(a) {
                        return Err(Error::contract(format!(
                            "position {} tagged {p} after rows produced by adapter#{}",
                            start + i,
                            a.0
                        )));
                    }
                }
                prev = Some(p);
            }
            self.tail_provenance.extend_from_slice(provenance);
        } else {
            let end = start + provenance.len();
            if end > self.len() {
                return Err(Error::contract(format!(
                    "layer {layer} would reach {end} positions, only {} recorded",
                    self.len()
                )));
            }
            let recorded =
                &self.tail_provenance[start - self.sealed_length..end - self.sealed_length];
            if recorded != provenance {
                return Err(Error::contract(format!(
                    "layer {layer} provenance disagrees with layer 0 at positions {start}..{end}"
                )));
            }
        }
        self.tail_keys[layer].extend_from_slice(keys);
        self.tail_values[layer].extend_from_slice(values);
        Ok(())
    }

    /// Verifies that every layer and the token list cover every position.
    pub fn check_integrity(&self) -> Result<()> {
        let n = self.len();
        for layer in 0..self.n_layers {
            let l = self.layer_len(layer);
            if l != n {
                return Err(Error::contract(format!(
                    "layer {layer} holds {l} positions, cache has {n}"
                )));
            }
        }
        let t = self.sealed_length + self.tail_tokens.len();
        if t != n {
            return Err(Error::contract(format!(
                "token list holds {t} ids, cache has {n} positions"
            )));
        }
        Ok(())
    }

    /// Freezes every current position. Sealed rows never change again and may
    /// be shared by forks.
    pub fn seal(&mut self) -> Result<()> {
        self.check_integrity()?;
        if self.tail_provenance.is_empty() {
            return Ok(());
        }
        let chunk = Chunk {
            keys: self.tail_keys.iter_mut().map(std::mem::take).collect(),
            values: self.tail_values.iter_mut().map(std::mem::take).collect(),
            provenance: std::mem::take(&mut self.tail_provenance),
            tokens: std::mem::take(&mut self.tail_tokens),
        };
        let len = chunk.len();
        self.sealed.push(ChunkRef {
            chunk: Arc::new(chunk),
            len,
            owned: true,
        });
        self.sealed_length += len;
        Ok(())
    }

    /// A new cache whose first `length` positions alias this cache's sealed
    /// storage and which can grow independently.
    pub fn fork_shared(&self, length: usize) -> Result<CacheStore> {
        if length > self.sealed_length {
            return Err(Error::contract(format!(
                "cannot fork at {length}: only {} positions are sealed",
                self.sealed_length
            )));
        }
        let mut fork = CacheStore::with_dims(self.n_layers, self.d_model);
        let mut remaining = length;
        for c in &self.sealed {
            if remaining == 0 {
                break;
            }
            let take = c.len.min(remaining);
            fork.sealed.push(ChunkRef {
                chunk: Arc::clone(&c.chunk),
                len: take,
                owned: false,
            });
            remaining -= take;
        }
        fork.sealed_length = length;
        Ok(fork)
    }

    /// Longest prefix whose every position `consumer` may reuse.
    pub fn reusable_prefix(&self, consumer: Provenance) -> usize {
        self.provenance()
            .iter()
            .take_while(|p| p.reusable_by(consumer))
            .count()
    }

    /// Bytes held exclusively by this cache, excluding aliased prefixes.
    pub fn incremental_bytes(&self) -> u64 {
        let owned: usize = self
            .sealed
            .iter()
            .filter(|c| c.owned)
            .map(|c| c.chunk.len())
            .sum();
        (owned + self.tail_provenance.len()) as u64 * self.row_bytes()
    }

    /// Bytes of every distinct buffer reachable from `caches`, each counted once.
    pub fn unique_bytes(caches: &[&CacheStore]) -> u64 {
        let mut chunks: HashMap<*const Chunk, u64> = HashMap::new();
        let mut tails = 0;
        for cache in caches {
            for c in &cache.sealed {
                chunks.insert(
                    Arc::as_ptr(&c.chunk),
                    c.chunk.len() as u64 * cache.row_bytes(),
                );
            }
            tails += cache.tail_provenance.len() as u64 * cache.row_bytes();
        }
        chunks.values().sum::<u64>() + tails
    }

    /// Views the rows currently stored at `layer`.
    pub fn layer_view(&self, layer: usize) -> LayerView<'_> {
        let d = self.d_model;
        let n = self.layer_len(layer);
        let mut keys = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n);
        for c in &self.sealed {
            let used = c.len * d;
            keys.extend(c.chunk.keys[layer][..used].chunks_exact(d));
            values.extend(c.chunk.values[layer][..used].chunks_exact(d));
        }
        keys.extend(self.tail_keys[layer].chunks_exact(d));
        values.extend(self.tail_values[layer].chunks_exact(d));
        LayerView { keys, values }
    }

    pub fn key_row(&self, layer: usize, position: usize) -> Option<&[f32]> {
        self.row(layer, position, true)
    }

    pub fn value_row(&self, layer: usize, position: usize) -> Option<&[f32]> {
        self.row(layer, position, false)
    }

    fn row(&self, layer: usize, position: usize, key: bool) -> Option<&[f32]> {
        let d = self.d_model;
        let mut base = 0;
        for c in &self.sealed {
            if position < base + c.len {
                let buf = if key {
                    &c.chunk.keys[layer]
                } else {
                    &c.chunk.values[layer]
                };
                let i = position - base;
                return Some(&buf[i * d..(i + 1) * d]);
            }
            base += c.len;
        }
        let buf = if key {
            &self.tail_keys[layer]
        } else {
            &self.tail_values[layer]
        };
        let i = position - base;
        buf.get(i * d..(i + 1) * d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A1: Provenance = Provenance::Adapter(AdapterId(1));
    const A2: Provenance = Provenance::Adapter(AdapterId(2));
    const B: Provenance = Provenance::Base;

    fn filled(n_layers: usize, d: usize, prov: &[Provenance], salt: f32) -> CacheStore {
        let mut c = CacheStore::with_dims(n_layers, d);
        push(&mut c, prov, salt);
        c
    }

    fn push(c: &mut CacheStore, prov: &[Provenance], salt: f32) {
        let d = c.d_model();
        let start = c.len();
        c.append_tokens(&(start as u32..(start + prov.len()) as u32).collect::<Vec<_>>());
        for layer in 0..c.n_layers() {
            let k: Vec<f32> = (0..prov.len() * d)
                .map(|i| salt + (layer * 1000 + start * d + i) as f32)
                .collect();
            let v: Vec<f32> = k.iter().map(|x| -x).collect();
            c.append_rows(layer, &k, &v, prov).unwrap();
        }
    }

    #[test]
    fn append_and_empty_append() {
        let mut c = filled(2, 4, &[B, B, B], 0.0);
        assert_eq!(c.len(), 3);
        c.append_rows(1, &[], &[], &[]).unwrap();
        assert_eq!(c.len(), 3);
        c.check_integrity().unwrap();
    }

    #[test]
    fn uneven_layers_fail_integrity_naming_layer() {
        let mut c = CacheStore::with_dims(3, 2);
        c.append_tokens(&[1, 2]);
        c.append_rows(0, &[0.0; 4], &[0.0; 4], &[B, B]).unwrap();
        c.append_rows(1, &[0.0; 4], &[0.0; 4], &[B, B]).unwrap();
        c.append_rows(2, &[0.0; 2], &[0.0; 2], &[B]).unwrap();
        let err = c.check_integrity().unwrap_err().to_string();
        assert!(err.contains("layer 2"), "{err}");
        assert!(c.seal().is_err());
    }

    #[test]
    fn sealed_region_cannot_be_extended_through_forks_past_seal() {
        let mut c = filled(1, 2, &[B, B], 0.0);
        c.seal().unwrap();
        push(&mut c, &[B], 0.0);
        assert!(c.fork_shared(3).is_err());
        assert!(c.fork_shared(2).is_ok());
    }

    #[test]
    fn monotone_provenance_enforced() {
        let mut c = filled(1, 2, &[B, A1], 0.0);
        c.append_tokens(&[9]);
        assert!(c.append_rows(0, &[0.0; 2], &[0.0; 2], &[B]).is_err());
        assert!(c.append_rows(0, &[0.0; 2], &[0.0; 2], &[A2]).is_err());
        assert!(c.append_rows(0, &[0.0; 2], &[0.0; 2], &[A1]).is_ok());
    }

    #[test]
    fn reusable_prefix_rules() {
        assert_eq!(filled(1, 2, &[B, B, B], 0.0).reusable_prefix(A1), 3);
        assert_eq!(filled(1, 2, &[B, B, A1, A1], 0.0).reusable_prefix(B), 2);
        assert_eq!(filled(1, 2, &[B, B, A1, A1], 0.0).reusable_prefix(A1), 4);
        // [Base, Adapter(2), Base] cannot be built by one request; splice it.
        let mut c = filled(1, 2, &[B], 0.0);
        c.tail_provenance.extend([A2, B]);
        assert_eq!(c.reusable_prefix(A1), 1);
    }

    #[test]
    fn fork_extends_without_touching_parent() {
        let mut parent = filled(2, 4, &[B; 5], 0.5);
        parent.seal().unwrap();
        let snapshot: Vec<Vec<f32>> = (0..5)
            .map(|p| parent.key_row(1, p).unwrap().to_vec())
            .collect();
        let mut child = parent.fork_shared(5).unwrap();
        push(&mut child, &[A1; 16], 7.0);
        assert_eq!(parent.len(), 5);
        assert_eq!(child.len(), 21);
        for (p, row) in snapshot.iter().enumerate() {
            assert_eq!(parent.key_row(1, p).unwrap(), &row[..]);
            assert_eq!(child.key_row(1, p).unwrap(), &row[..]);
        }
        let empty = parent.fork_shared(0).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.incremental_bytes(), 0);
    }

    #[test]
    fn byte_accounting() {
        let (layers, d) = (3, 8);
        let rowbytes = (layers * 2 * d * 4) as u64;
        let mut parent = filled(layers, d, &[B; 10], 0.0);
        assert_eq!(parent.incremental_bytes(), 10 * rowbytes);
        parent.seal().unwrap();
        let forks: Vec<CacheStore> = (0..4)
            .map(|i| {
                let mut f = parent.fork_shared(10).unwrap();
                push(&mut f, &[Provenance::Adapter(AdapterId(i)); 6], i as f32);
                f
            })
            .collect();
        for f in &forks {
            assert_eq!(f.incremental_bytes(), 6 * rowbytes);
        }
        let total: u64 = forks.iter().map(|f| f.incremental_bytes()).sum();
        assert_eq!(total, 4 * 6 * rowbytes);
        let mut all: Vec<&CacheStore> = forks.iter().collect();
        all.push(&parent);
        assert_eq!(
            CacheStore::unique_bytes(&all),
            total + parent.incremental_bytes()
        );
    }

    proptest! {
        #[test]
        fn fork_tree_bytes_equal_flat_union(
            base_len in 1usize..20,
            cuts in proptest::collection::vec((0usize..20, 0usize..10), 1..5),
        ) {
            let (layers, d) = (2, 4);
            let mut root = filled(layers, d, &vec![B; base_len], 0.0);
            root.seal().unwrap();
            let mut caches = vec![root.clone()];
            let mut positions = base_len;
            for (i, (cut, extra)) in cuts.into_iter().enumerate() {
                let mut f = root.fork_shared(cut.min(base_len)).unwrap();
                push(&mut f, &vec![Provenance::Adapter(AdapterId(i as u32)); extra], 1.0);
                positions += extra;
                caches.push(f);
            }
            let refs: Vec<&CacheStore> = caches.iter().collect();
            let sum: u64 = caches.iter().map(|c| c.incremental_bytes()).sum();
            prop_assert_eq!(sum, CacheStore::unique_bytes(&refs));
            prop_assert_eq!(sum, positions as u64 * root.row_bytes());
        }
    }
}
