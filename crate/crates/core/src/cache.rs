//! Per-layer, per-KV-head key/value storage.
//!
//! Eviction is layer-unified: one [`EvictionDecision`] names the original
//! positions a layer keeps, and every KV head of that layer is compacted to
//! exactly those rows. Each layer tracks the original position of every row
//! so decisions, traces and metrics all speak in prompt coordinates.
//!
//! Positions appended after [`KVCache::begin_decode`] are decode-time
//! entries and are never evicted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::TensorBundle;
use crate::numerics::Matrix;

/// Original positions a layer keeps after eviction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionDecision {
    pub layer: usize,
    pub keep_indices: Vec<usize>,
}

impl EvictionDecision {
    /// Validates that `keep_indices` is non-empty and strictly increasing.
    pub fn new(layer: usize, keep_indices: Vec<usize>) -> Result<Self> {
        if keep_indices.is_empty() {
            return Err(Error::InvalidArgument(format!("layer {layer}: empty keep set")));
        }
        if keep_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "layer {layer}: keep indices must be strictly increasing"
            )));
        }
        Ok(Self { layer, keep_indices })
    }

    pub fn keep_all(layer: usize, len: usize) -> Self {
        Self {
            layer,
            keep_indices: (0..len).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.keep_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep_indices.is_empty()
    }

    pub fn contains(&self, position: usize) -> bool {
        self.keep_indices.binary_search(&position).is_ok()
    }
}

/// One layer's keys and values, one matrix per KV head.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
    positions: Vec<usize>,
    next_position: usize,
    decode_from: Option<usize>,
}

impl LayerCache {
    pub fn new(num_kv_heads: usize, head_dim: usize) -> Self {
        Self {
            keys: vec![Matrix::with_cols(head_dim); num_kv_heads],
            values: vec![Matrix::with_cols(head_dim); num_kv_heads],
            positions: Vec::new(),
            next_position: 0,
            decode_from: None,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn num_kv_heads(&self) -> usize {
        self.keys.len()
    }

    pub fn head_dim(&self) -> usize {
        self.keys.first().map_or(0, Matrix::cols)
    }

    /// Original position of every stored row, strictly increasing.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn keys(&self, kv_head: usize) -> &Matrix {
        &self.keys[kv_head]
    }

    pub fn values(&self, kv_head: usize) -> &Matrix {
        &self.values[kv_head]
    }

    /// First decode-time position, once decoding has started.
    pub fn decode_from(&self) -> Option<usize> {
        self.decode_from
    }

    /// Appends one token. `k` and `v` hold all KV heads concatenated
    /// (`num_kv_heads * head_dim` entries each).
    pub fn append(&mut self, k: &[f64], v: &[f64]) -> Result<usize> {
        let d = self.head_dim();
        let width = d * self.num_kv_heads();
        if k.len() != width || v.len() != width {
            return Err(Error::shape(
                "LayerCache::append",
                format!("rows of width {width}"),
                format!("key {} / value {}", k.len(), v.len()),
            ));
        }
        for h in 0..self.num_kv_heads() {
            self.keys[h].push_row(&k[h * d..(h + 1) * d])?;
            self.values[h].push_row(&v[h * d..(h + 1) * d])?;
        }
        let pos = self.next_position;
        self.positions.push(pos);
        self.next_position += 1;
        Ok(pos)
    }

    /// A copy restricted to the given original positions.
    pub fn retain_view(&self, keep: &[usize]) -> Result<LayerCache> {
        let rows = self.rows_for(keep, usize::MAX)?;
        Ok(LayerCache {
            keys: self.keys.iter().map(|m| m.select_rows(&rows)).collect(),
            values: self.values.iter().map(|m| m.select_rows(&rows)).collect(),
            positions: keep.to_vec(),
            next_position: self.next_position,
            decode_from: self.decode_from,
        })
    }

    fn rows_for(&self, keep: &[usize], layer: usize) -> Result<Vec<usize>> {
        if keep.is_empty() {
            return Err(Error::InvalidArgument("empty keep set".into()));
        }
        let mut rows = Vec::with_capacity(keep.len());
        let mut prev = None;
        for &p in keep {
            if prev.is_some_and(|q| q >= p) {
                return Err(Error::InvalidArgument("keep indices must be strictly increasing".into()));
            }
            prev = Some(p);
            let row = self
                .positions
                .binary_search(&p)
                .map_err(|_| Error::UnknownPosition { layer, position: p })?;
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Snapshot of retained token counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub per_layer: Vec<usize>,
    pub total: usize,
}

/// Key/value cache for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    layers: Vec<LayerCache>,
}

impl KVCache {
    pub fn new(num_layers: usize, num_kv_heads: usize, head_dim: usize) -> Self {
        Self {
            layers: vec![LayerCache::new(num_kv_heads, head_dim); num_layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, layer: usize) -> &LayerCache {
        &self.layers[layer]
    }

    pub fn layers(&self) -> &[LayerCache] {
        &self.layers
    }

    pub fn append(&mut self, layer: usize, k: &[f64], v: &[f64]) -> Result<usize> {
        self.layer_mut(layer)?.append(k, v)
    }

    /// Marks the prompt boundary: later appends are decode-time entries.
    /// Idempotent.
    pub fn begin_decode(&mut self) {
        for l in &mut self.layers {
            if l.decode_from.is_none() {
                l.decode_from = Some(l.next_position);
            }
        }
    }

    pub fn is_decoding(&self) -> bool {
        self.layers.iter().any(|l| l.decode_from.is_some())
    }

    /// Compacts one layer to exactly the kept positions.
    pub fn apply_eviction(&mut self, decision: &EvictionDecision) -> Result<()> {
        let layer = decision.layer;
        let lc = self.layer_mut(layer)?;
        if let Some(from) = lc.decode_from {
            if let Some(&p) = lc
                .positions
                .iter()
                .find(|&&p| p >= from && !decision.contains(p))
            {
                return Err(Error::DecodeEviction { layer, position: p });
            }
        }
        let rows = lc.rows_for(&decision.keep_indices, layer)?;
        if rows.len() == lc.len() {
            return Ok(());
        }
        for m in lc.keys.iter_mut().chain(lc.values.iter_mut()) {
            *m = m.select_rows(&rows);
        }
        lc.positions = decision.keep_indices.clone();
        Ok(())
    }

    pub fn memory_report(&self) -> MemoryReport {
        let per_layer: Vec<usize> = self.layers.iter().map(LayerCache::len).collect();
        let total = per_layer.iter().sum();
        MemoryReport { per_layer, total }
    }

    fn layer_mut(&mut self, layer: usize) -> Result<&mut LayerCache> {
        let n = self.layers.len();
        self.layers
            .get_mut(layer)
            .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} out of range ({n} layers)")))
    }

    /// Serializes to a tensor bundle (`layer{l}.kv{h}.k` / `.v`), with
    /// positions and decode boundaries in the metadata.
    pub fn to_bundle(&self) -> TensorBundle {
        let layers_meta: Vec<_> = self
            .layers
            .iter()
            .map(|l| {
                serde_json::json!({
                    "positions": l.positions,
                    "next_position": l.next_position,
                    "decode_from": l.decode_from,
                })
            })
            .collect();
        let mut b = TensorBundle::new(serde_json::json!({
            "kind": "kv_cache",
            "num_layers": self.layers.len(),
            "num_kv_heads": self.layers.first().map_or(0, LayerCache::num_kv_heads),
            "head_dim": self.layers.first().map_or(0, LayerCache::head_dim),
            "layers": layers_meta,
        }));
        for (l, lc) in self.layers.iter().enumerate() {
            for h in 0..lc.num_kv_heads() {
                b.push(format!("layer{l}.kv{h}.k"), lc.keys[h].clone());
                b.push(format!("layer{l}.kv{h}.v"), lc.values[h].clone());
            }
        }
        b
    }

    pub fn from_bundle(b: &TensorBundle) -> Result<Self> {
        #[derive(Deserialize)]
        struct LayerMeta {
            positions: Vec<usize>,
            next_position: usize,
            decode_from: Option<usize>,
        }
        #[derive(Deserialize)]
        struct Meta {
            num_kv_heads: usize,
            layers: Vec<LayerMeta>,
        }
        let meta: Meta = serde_json::from_value(b.meta.clone())?;
        let mut layers = Vec::with_capacity(meta.layers.len());
        for (l, lm) in meta.layers.into_iter().enumerate() {
            let mut keys = Vec::with_capacity(meta.num_kv_heads);
            let mut values = Vec::with_capacity(meta.num_kv_heads);
            for h in 0..meta.num_kv_heads {
                let k = b.get(&format!("layer{l}.kv{h}.k"))?.clone();
                let v = b.get(&format!("layer{l}.kv{h}.v"))?.clone();
                if k.rows() != lm.positions.len() || v.shape() != k.shape() {
                    return Err(Error::shape(
                        "KVCache::from_bundle",
                        format!("{} rows", lm.positions.len()),
                        format!("{:?} / {:?}", k.shape(), v.shape()),
                    ));
                }
                keys.push(k);
                values.push(v);
            }
            layers.push(LayerCache {
                keys,
                values,
                positions: lm.positions,
                next_position: lm.next_position,
                decode_from: lm.decode_from,
            });
        }
        Ok(Self { layers })
    }
}
