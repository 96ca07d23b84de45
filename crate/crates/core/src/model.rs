//! A pure grouped-query attention stack.
//!
//! Each layer projects its input rows to queries, keys and values, runs
//! scaled dot-product attention per query head against the K/V of that
//! head's group, concatenates the head outputs and applies `W_O`. The
//! layer's output is the next layer's input; there are no MLP blocks,
//! norms, residual connections or position encodings.
//!
//! Scores are scaled by `1/sqrt(head_dim)`.

use serde::{Deserialize, Serialize};

use crate::cache::{KVCache, LayerCache};
use crate::error::{Error, Result};
use crate::heads::HeadMask;
use crate::io::TensorBundle;
use crate::numerics::{dot, matmul, mix_seed, seeded_random_matrix, softmax_in_place, softmax_rows, vecmat, Matrix};

/// Geometry of the attention stack. Field names double as the JSON schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_q_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Builds a config with `hidden_dim = num_q_heads * head_dim`.
    pub fn new(num_layers: usize, num_q_heads: usize, num_kv_heads: usize, head_dim: usize, seed: u64) -> Result<Self> {
        let c = Self {
            num_layers,
            num_q_heads,
            num_kv_heads,
            head_dim,
            hidden_dim: num_q_heads * head_dim,
            seed,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("num_q_heads", self.num_q_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
        }
        if !self.num_q_heads.is_multiple_of(self.num_kv_heads) {
            return Err(Error::InvalidArgument(format!(
                "num_q_heads ({}) must be divisible by num_kv_heads ({})",
                self.num_q_heads, self.num_kv_heads
            )));
        }
        if self.hidden_dim != self.num_q_heads * self.head_dim {
            return Err(Error::InvalidArgument(format!(
                "hidden_dim ({}) must equal num_q_heads * head_dim ({})",
                self.hidden_dim,
                self.num_q_heads * self.head_dim
            )));
        }
        Ok(())
    }

    /// Query heads per KV group.
    pub fn group_size(&self) -> usize {
        self.num_q_heads / self.num_kv_heads
    }

    pub fn kv_head_of(&self, q_head: usize) -> usize {
        q_head / self.group_size()
    }

    pub fn kv_width(&self) -> usize {
        self.num_kv_heads * self.head_dim
    }

    /// FNV-1a over the canonical JSON encoding; identifies a model in
    /// artifact metadata.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// hidden_dim × (num_q_heads · head_dim)
    pub w_q: Matrix,
    /// hidden_dim × (num_kv_heads · head_dim)
    pub w_k: Matrix,
    /// hidden_dim × (num_kv_heads · head_dim)
    pub w_v: Matrix,
    /// (num_q_heads · head_dim) × hidden_dim
    pub w_o: Matrix,
}

/// Per-head attention weights of one forward pass.
///
/// Prefill matrices are `prompt_len × prompt_len` and causal. Decode rows
/// are stored with the original position of every column they cover, so
/// they stay interpretable after eviction.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub num_q_heads: usize,
    pub num_kv_heads: usize,
    pub prompt_len: usize,
    pub layers: Vec<LayerTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// One causal `prompt_len × prompt_len` matrix per query head.
    pub prefill: Vec<Matrix>,
    pub decode: Vec<DecodeRows>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeRows {
    pub positions: Vec<usize>,
    /// One row per query head, aligned with `positions`.
    pub rows: Vec<Vec<f64>>,
}

impl AttentionTrace {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn group_size(&self) -> usize {
        self.num_q_heads / self.num_kv_heads
    }

    pub fn decode_steps(&self) -> usize {
        self.layers.first().map_or(0, |l| l.decode.len())
    }

    /// Appends the attention rows of one decode step.
    pub fn push_decode(&mut self, step: &DecodeStep) {
        for (lt, (rows, positions)) in self
            .layers
            .iter_mut()
            .zip(step.attention.iter().zip(&step.positions))
        {
            lt.decode.push(DecodeRows {
                positions: positions.clone(),
                rows: rows.clone(),
            });
        }
    }

    /// Checks row normalization (±`tol`) and causal support of the prefill part.
    pub fn validate(&self, tol: f64) -> Result<()> {
        for (l, lt) in self.layers.iter().enumerate() {
            if lt.prefill.len() != self.num_q_heads {
                return Err(Error::shape("AttentionTrace::validate", self.num_q_heads, lt.prefill.len()));
            }
            for (h, m) in lt.prefill.iter().enumerate() {
                if m.shape() != (self.prompt_len, self.prompt_len) {
                    return Err(Error::shape(
                        "AttentionTrace::validate",
                        format!("{0}×{0}", self.prompt_len),
                        format!("{:?}", m.shape()),
                    ));
                }
                for (i, row) in m.row_iter().enumerate() {
                    check_row(row, tol, l, h)?;
                    if row[i + 1..].iter().any(|&v| v != 0.0) {
                        return Err(Error::InvalidArgument(format!(
                            "layer {l} head {h}: row {i} attends to future positions"
                        )));
                    }
                }
            }
            for step in &lt.decode {
                for (h, row) in step.rows.iter().enumerate() {
                    if row.len() != step.positions.len() {
                        return Err(Error::shape("AttentionTrace::validate", step.positions.len(), row.len()));
                    }
                    check_row(row, tol, l, h)?;
                }
            }
        }
        Ok(())
    }

    /// Serializes as `l{l}.h{h}.prefill` plus one `l{l}.s{t}.h{h}` row per decode step.
    pub fn to_bundle(&self) -> TensorBundle {
        let positions: Vec<Vec<Vec<usize>>> = self
            .layers
            .iter()
            .map(|lt| lt.decode.iter().map(|d| d.positions.clone()).collect())
            .collect();
        let mut b = TensorBundle::new(serde_json::json!({
            "kind": "attention_trace",
            "num_q_heads": self.num_q_heads,
            "num_kv_heads": self.num_kv_heads,
            "prompt_len": self.prompt_len,
            "num_layers": self.layers.len(),
            "decode_positions": positions,
        }));
        for (l, lt) in self.layers.iter().enumerate() {
            for (h, m) in lt.prefill.iter().enumerate() {
                b.push(format!("l{l}.h{h}.prefill"), m.clone());
            }
            for (t, step) in lt.decode.iter().enumerate() {
                for (h, row) in step.rows.iter().enumerate() {
                    b.push(format!("l{l}.s{t}.h{h}"), Matrix::from_rows(&[row]).expect("single row"));
                }
            }
        }
        b
    }

    pub fn from_bundle(b: &TensorBundle) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            num_q_heads: usize,
            num_kv_heads: usize,
            prompt_len: usize,
            num_layers: usize,
            decode_positions: Vec<Vec<Vec<usize>>>,
        }
        let meta: Meta = serde_json::from_value(b.meta.clone())?;
        let mut layers = Vec::with_capacity(meta.num_layers);
        for l in 0..meta.num_layers {
            let prefill = (0..meta.num_q_heads)
                .map(|h| b.get(&format!("l{l}.h{h}.prefill")).cloned())
                .collect::<Result<Vec<_>>>()?;
            let mut decode = Vec::new();
            for (t, positions) in meta.decode_positions.get(l).into_iter().flatten().enumerate() {
                let rows = (0..meta.num_q_heads)
                    .map(|h| b.get(&format!("l{l}.s{t}.h{h}")).map(|m| m.data().to_vec()))
                    .collect::<Result<Vec<_>>>()?;
                decode.push(DecodeRows {
                    positions: positions.clone(),
                    rows,
                });
            }
            layers.push(LayerTrace { prefill, decode });
        }
        let trace = Self {
            num_q_heads: meta.num_q_heads,
            num_kv_heads: meta.num_kv_heads,
            prompt_len: meta.prompt_len,
            layers,
        };
        trace.validate(1e-9)?;
        Ok(trace)
    }
}

fn check_row(row: &[f64], tol: f64, layer: usize, head: usize) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > tol || row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} head {head}: attention row sums to {sum}"
        )));
    }
    Ok(())
}

/// Result of running the prompt through every layer.
#[derive(Debug, Clone)]
pub struct Prefill {
    /// Final-layer output, `prompt_len × hidden_dim`.
    pub hidden: Matrix,
    pub cache: KVCache,
    pub trace: AttentionTrace,
}

/// Result of one decode step.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeStep {
    /// Final-layer output row.
    pub hidden: Vec<f64>,
    /// Input row of every layer (layer 0 gets the token embedding).
    pub layer_inputs: Vec<Vec<f64>>,
    /// Attention-block output row of every layer.
    pub layer_outputs: Vec<Vec<f64>>,
    /// `[layer][q_head]` attention row over the layer's cache.
    pub attention: Vec<Vec<Vec<f64>>>,
    /// Original positions the attention rows cover, per layer.
    pub positions: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GQAModel {
    config: ModelConfig,
    layers: Vec<LayerWeights>,
}

/// Seed of weight matrix `which` (0..4 = Q, K, V, O) in `layer`:
/// stream `4·layer + which` of [`mix_seed`].
pub fn weight_seed(seed: u64, layer: usize, which: u64) -> u64 {
    mix_seed(seed, 4 * layer as u64 + which)
}

impl GQAModel {
    /// Random weights from the config seed, each entry with standard
    /// deviation `1/sqrt(fan_in)`.
    pub fn seeded(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let hd = config.hidden_dim;
        let qw = config.num_q_heads * config.head_dim;
        let kw = config.kv_width();
        let in_scale = 1.0 / (hd as f64).sqrt();
        let out_scale = 1.0 / (qw as f64).sqrt();
        let layers = (0..config.num_layers)
            .map(|l| {
                Ok(LayerWeights {
                    w_q: seeded_random_matrix(hd, qw, weight_seed(config.seed, l, 0), in_scale)?,
                    w_k: seeded_random_matrix(hd, kw, weight_seed(config.seed, l, 1), in_scale)?,
                    w_v: seeded_random_matrix(hd, kw, weight_seed(config.seed, l, 2), in_scale)?,
                    w_o: seeded_random_matrix(qw, hd, weight_seed(config.seed, l, 3), out_scale)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, layers })
    }

    pub fn from_weights(config: ModelConfig, layers: Vec<LayerWeights>) -> Result<Self> {
        config.validate()?;
        if layers.len() != config.num_layers {
            return Err(Error::shape("GQAModel::from_weights", config.num_layers, layers.len()));
        }
        let hd = config.hidden_dim;
        let qw = config.num_q_heads * config.head_dim;
        let kw = config.kv_width();
        for w in &layers {
            let expect = [
                ("w_q", &w.w_q, (hd, qw)),
                ("w_k", &w.w_k, (hd, kw)),
                ("w_v", &w.w_v, (hd, kw)),
                ("w_o", &w.w_o, (qw, hd)),
            ];
            for (name, m, shape) in expect {
                if m.shape() != shape {
                    return Err(Error::shape("GQAModel::from_weights", format!("{name} {shape:?}"), format!("{:?}", m.shape())));
                }
            }
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layer_weights(&self, layer: usize) -> &LayerWeights {
        &self.layers[layer]
    }

    pub fn empty_cache(&self) -> KVCache {
        KVCache::new(self.config.num_layers, self.config.num_kv_heads, self.config.head_dim)
    }

    pub fn prefill(&self, prompt: &Matrix) -> Result<Prefill> {
        self.prefill_masked(prompt, &HeadMask::default())
    }

    pub fn decode_step(&self, cache: &mut KVCache, token: &[f64]) -> Result<DecodeStep> {
        self.decode_step_masked(cache, token, &HeadMask::default())
    }

    /// `W_O` applied to the concatenated head outputs of `layer` for one
    /// input row attending over `view` (which is not modified).
    pub fn attention_block_output(&self, layer: usize, input_row: &[f64], view: &LayerCache) -> Result<Vec<f64>> {
        self.attention_block_output_masked(layer, input_row, view, &HeadMask::default())
    }

    /// Key and value rows (all KV heads concatenated) of one layer input row.
    pub fn project_kv(&self, layer: usize, input_row: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let w = &self.layers[layer];
        Ok((vecmat(input_row, &w.w_k)?, vecmat(input_row, &w.w_v)?))
    }

    pub(crate) fn prefill_masked(&self, prompt: &Matrix, mask: &HeadMask) -> Result<Prefill> {
        let c = &self.config;
        if prompt.cols() != c.hidden_dim || prompt.rows() == 0 {
            return Err(Error::shape(
                "prefill",
                format!("≥1 row × {} cols", c.hidden_dim),
                format!("{:?}", prompt.shape()),
            ));
        }
        let n = prompt.rows();
        let d = c.head_dim;
        let scale = 1.0 / (d as f64).sqrt();
        let mut cache = self.empty_cache();
        let mut trace = AttentionTrace {
            num_q_heads: c.num_q_heads,
            num_kv_heads: c.num_kv_heads,
            prompt_len: n,
            layers: Vec::with_capacity(c.num_layers),
        };
        let mut x = prompt.clone();
        for (l, w) in self.layers.iter().enumerate() {
            let q = matmul(&x, &w.w_q)?;
            let k = matmul(&x, &w.w_k)?;
            let v = matmul(&x, &w.w_v)?;
            for t in 0..n {
                cache.append(l, k.row(t), v.row(t))?;
            }
            let keys_t: Vec<Matrix> = (0..c.num_kv_heads).map(|g| k.col_block(g * d, d).transpose()).collect();
            let vals: Vec<Matrix> = (0..c.num_kv_heads).map(|g| v.col_block(g * d, d)).collect();
            let mut concat = Matrix::zeros(n, c.num_q_heads * d);
            let mut weights = Vec::with_capacity(c.num_q_heads);
            for h in 0..c.num_q_heads {
                let g = c.kv_head_of(h);
                let scores = matmul(&q.col_block(h * d, d), &keys_t[g])?.scale(scale);
                let a = softmax_rows(&scores, Some(0))?;
                if !mask.contains(l, h) {
                    let out = matmul(&a, &vals[g])?;
                    for t in 0..n {
                        concat.row_mut(t)[h * d..(h + 1) * d].copy_from_slice(out.row(t));
                    }
                }
                weights.push(a);
            }
            trace.layers.push(LayerTrace {
                prefill: weights,
                decode: Vec::new(),
            });
            x = matmul(&concat, &w.w_o)?;
        }
        Ok(Prefill { hidden: x, cache, trace })
    }

    pub(crate) fn decode_step_masked(&self, cache: &mut KVCache, token: &[f64], mask: &HeadMask) -> Result<DecodeStep> {
        let c = &self.config;
        if token.len() != c.hidden_dim {
            return Err(Error::shape("decode_step", c.hidden_dim, token.len()));
        }
        if cache.num_layers() != c.num_layers {
            return Err(Error::shape("decode_step", format!("{} cache layers", c.num_layers), cache.num_layers()));
        }
        cache.begin_decode();
        let mut x = token.to_vec();
        let mut step = DecodeStep {
            hidden: Vec::new(),
            layer_inputs: Vec::with_capacity(c.num_layers),
            layer_outputs: Vec::with_capacity(c.num_layers),
            attention: Vec::with_capacity(c.num_layers),
            positions: Vec::with_capacity(c.num_layers),
        };
        for (l, w) in self.layers.iter().enumerate() {
            let k = vecmat(&x, &w.w_k)?;
            let v = vecmat(&x, &w.w_v)?;
            cache.append(l, &k, &v)?;
            let (out, rows) = self.attend(l, &x, cache.layer(l), mask)?;
            step.layer_inputs.push(std::mem::replace(&mut x, out.clone()));
            step.layer_outputs.push(out);
            step.attention.push(rows);
            step.positions.push(cache.layer(l).positions().to_vec());
        }
        step.hidden = x;
        Ok(step)
    }

    pub(crate) fn attention_block_output_masked(
        &self,
        layer: usize,
        input_row: &[f64],
        view: &LayerCache,
        mask: &HeadMask,
    ) -> Result<Vec<f64>> {
        if layer >= self.config.num_layers {
            return Err(Error::InvalidArgument(format!("layer {layer} out of range")));
        }
        if input_row.len() != self.config.hidden_dim {
            return Err(Error::shape("attention_block_output", self.config.hidden_dim, input_row.len()));
        }
        self.attend(layer, input_row, view, mask).map(|(out, _)| out)
    }

    /// Per-head attention of one input row over a layer cache. Returns the
    /// block output and every head's attention row.
    fn attend(&self, layer: usize, x: &[f64], view: &LayerCache, mask: &HeadMask) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let c = &self.config;
        if view.is_empty() {
            return Err(Error::InvalidArgument(format!("layer {layer}: attention over an empty cache")));
        }
        if view.num_kv_heads() != c.num_kv_heads || view.head_dim() != c.head_dim {
            return Err(Error::shape(
                "attention",
                format!("{} kv heads × {}", c.num_kv_heads, c.head_dim),
                format!("{} kv heads × {}", view.num_kv_heads(), view.head_dim()),
            ));
        }
        let w = &self.layers[layer];
        let d = c.head_dim;
        let scale = 1.0 / (d as f64).sqrt();
        let q = vecmat(x, &w.w_q)?;
        let mut concat = vec![0.0; c.num_q_heads * d];
        let mut rows = Vec::with_capacity(c.num_q_heads);
        for h in 0..c.num_q_heads {
            let g = c.kv_head_of(h);
            let qh = &q[h * d..(h + 1) * d];
            let keys = view.keys(g);
            let mut a: Vec<f64> = keys.row_iter().map(|k| dot(qh, k) * scale).collect();
            softmax_in_place(&mut a);
            if !mask.contains(layer, h) {
                let out = &mut concat[h * d..(h + 1) * d];
                for (&aj, vj) in a.iter().zip(view.values(g).row_iter()) {
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += aj * vv;
                    }
                }
            }
            rows.push(a);
        }
        Ok((vecmat(&concat, &w.w_o)?, rows))
    }

    pub fn to_bundle(&self) -> TensorBundle {
        let mut b = TensorBundle::new(serde_json::json!({
            "kind": "gqa_model",
            "config": self.config,
        }));
        for (l, w) in self.layers.iter().enumerate() {
            b.push(format!("layer{l}.w_q"), w.w_q.clone());
            b.push(format!("layer{l}.w_k"), w.w_k.clone());
            b.push(format!("layer{l}.w_v"), w.w_v.clone());
            b.push(format!("layer{l}.w_o"), w.w_o.clone());
        }
        b
    }

    pub fn from_bundle(b: &TensorBundle) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(
            b.meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::InvalidArgument("model bundle has no config".into()))?,
        )?;
        let layers = (0..config.num_layers)
            .map(|l| {
                Ok(LayerWeights {
                    w_q: b.get(&format!("layer{l}.w_q"))?.clone(),
                    w_k: b.get(&format!("layer{l}.w_k"))?.clone(),
                    w_v: b.get(&format!("layer{l}.w_v"))?.clone(),
                    w_o: b.get(&format!("layer{l}.w_o"))?.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Self::from_weights(config, layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::EvictionDecision;
    use crate::numerics::frobenius_norm;

    fn model(layers: usize, q: usize, kv: usize, d: usize, seed: u64) -> GQAModel {
        GQAModel::seeded(ModelConfig::new(layers, q, kv, d, seed).unwrap()).unwrap()
    }

    /// Recomputes the final-layer output of the last row of `x` by running
    /// full causal attention over every row from scratch.
    fn recompute_last_row(m: &GQAModel, x: &Matrix) -> Vec<f64> {
        let c = m.config();
        let d = c.head_dim;
        let mut h = x.clone();
        for l in 0..c.num_layers {
            let w = m.layer_weights(l);
            let (q, k, v) = (matmul(&h, &w.w_q).unwrap(), matmul(&h, &w.w_k).unwrap(), matmul(&h, &w.w_v).unwrap());
            let n = h.rows();
            let mut concat = Matrix::zeros(n, c.num_q_heads * d);
            for i in 0..n {
                for head in 0..c.num_q_heads {
                    let g = head / (c.num_q_heads / c.num_kv_heads);
                    let mut s: Vec<f64> = (0..=i)
                        .map(|j| {
                            (0..d).map(|e| q.get(i, head * d + e) * k.get(j, g * d + e)).sum::<f64>() / (d as f64).sqrt()
                        })
                        .collect();
                    let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = s.iter_mut().map(|v| { *v = (*v - mx).exp(); *v }).sum();
                    for e in 0..d {
                        let o: f64 = (0..=i).map(|j| s[j] / z * v.get(j, g * d + e)).sum();
                        concat.set(i, head * d + e, o);
                    }
                }
            }
            h = matmul(&concat, &w.w_o).unwrap();
        }
        h.row(h.rows() - 1).to_vec()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::new(2, 6, 4, 8, 0).is_err());
        assert!(ModelConfig::new(0, 4, 2, 8, 0).is_err());
        let mut c = ModelConfig::new(1, 4, 2, 8, 0).unwrap();
        c.hidden_dim = 31;
        assert!(c.validate().is_err());
    }

    #[test]
    fn single_token_prompt_attends_to_itself() {
        let m = model(2, 4, 2, 4, 1);
        let x = seeded_random_matrix(1, 16, 2, 1.0).unwrap();
        let p = m.prefill(&x).unwrap();
        for lt in &p.trace.layers {
            for a in &lt.prefill {
                assert_eq!(a.data(), &[1.0]);
            }
        }
    }

    #[test]
    fn prefill_matches_recomputation() {
        let m = model(2, 4, 2, 4, 3);
        let x = seeded_random_matrix(8, 16, 4, 1.0).unwrap();
        let p = m.prefill(&x).unwrap();
        for t in 1..=8 {
            let expect = recompute_last_row(&m, &x.select_rows(&(0..t).collect::<Vec<_>>()));
            assert!(close(p.hidden.row(t - 1), &expect, 1e-9));
        }
    }

    #[test]
    fn trace_rows_normalized_and_causal() {
        let m = model(2, 4, 2, 8, 5);
        let x = seeded_random_matrix(16, 32, 6, 1.0).unwrap();
        let p = m.prefill(&x).unwrap();
        p.trace.validate(1e-9).unwrap();
        assert_eq!(p.cache.memory_report().per_layer, vec![16, 16]);
    }

    #[test]
    fn decode_matches_recomputation() {
        let m = model(3, 4, 2, 4, 7);
        let x = seeded_random_matrix(10, 16, 8, 1.0).unwrap();
        let p = m.prefill(&x.select_rows(&(0..6).collect::<Vec<_>>())).unwrap();
        let mut cache = p.cache;
        for t in 6..10 {
            let before = cache.memory_report().per_layer;
            let step = m.decode_step(&mut cache, x.row(t)).unwrap();
            let after = cache.memory_report().per_layer;
            assert!(before.iter().zip(&after).all(|(b, a)| a - b == 1));
            let expect = recompute_last_row(&m, &x.select_rows(&(0..=t).collect::<Vec<_>>()));
            assert!(close(&step.hidden, &expect, 1e-9));
        }
    }

    #[test]
    fn decode_on_empty_cache() {
        let m = model(1, 2, 1, 4, 9);
        let mut cache = m.empty_cache();
        let step = m.decode_step(&mut cache, &[0.3; 8]).unwrap();
        assert_eq!(step.attention[0], vec![vec![1.0], vec![1.0]]);
        assert!(m.decode_step(&mut cache, &[0.3; 7]).is_err());
    }

    #[test]
    fn gqa_heads_share_group_kv() {
        let m = model(1, 6, 2, 4, 10);
        let x = seeded_random_matrix(5, 24, 11, 1.0).unwrap();
        let p = m.prefill(&x).unwrap();
        // Each KV head's keys equal the projection through that group's W_K slice.
        let k = matmul(&x, &m.layer_weights(0).w_k).unwrap();
        for g in 0..2 {
            assert_eq!(p.cache.layer(0).keys(g), &k.col_block(g * 4, 4));
        }
        // Heads of one group with identical queries get identical weights.
        let mut w = m.layer_weights(0).clone();
        let q0 = w.w_q.col_block(0, 4);
        for r in 0..24 {
            for e in 0..4 {
                w.w_q.set(r, 4 + e, q0.get(r, e));
            }
        }
        let twin = GQAModel::from_weights(m.config().clone(), vec![w]).unwrap();
        let p = twin.prefill(&x).unwrap();
        assert_eq!(p.trace.layers[0].prefill[0], p.trace.layers[0].prefill[1]);
    }

    #[test]
    fn block_output_views() {
        let m = model(2, 4, 2, 4, 12);
        let x = seeded_random_matrix(12, 16, 13, 1.0).unwrap();
        let p = m.prefill(&x).unwrap();
        let mut cache = p.cache.clone();
        let step = m.decode_step(&mut cache, x.row(0)).unwrap();

        for l in 0..2 {
            let full = m.attention_block_output(l, &step.layer_inputs[l], cache.layer(l)).unwrap();
            assert_eq!(full, step.layer_outputs[l]);
            let all: Vec<usize> = cache.layer(l).positions().to_vec();
            let same = m.attention_block_output(l, &step.layer_inputs[l], &cache.layer(l).retain_view(&all).unwrap()).unwrap();
            assert_eq!(same, full);

            let rows = &step.attention[l][0];
            let top = (0..rows.len()).max_by(|&a, &b| rows[a].total_cmp(&rows[b])).unwrap();
            let only = cache.layer(l).retain_view(&[cache.layer(l).positions()[top]]).unwrap();
            let out = m.attention_block_output(l, &step.layer_inputs[l], &only).unwrap();
            let gap = frobenius_norm(&Matrix::from_rows(&[out]).unwrap().sub(&Matrix::from_rows(&[full]).unwrap()).unwrap());
            assert!(gap > 0.0);
        }
        let empty = LayerCache::new(2, 4);
        assert!(m.attention_block_output(0, &step.layer_inputs[0], &empty).is_err());
    }

    #[test]
    fn prefill_rejects_bad_width() {
        let m = model(1, 2, 1, 4, 0);
        assert!(m.prefill(&Matrix::zeros(3, 7)).is_err());
        assert!(m.prefill(&Matrix::zeros(0, 8)).is_err());
    }

    #[test]
    fn bundle_round_trip() {
        let m = model(2, 4, 2, 4, 21);
        assert_eq!(GQAModel::from_bundle(&m.to_bundle()).unwrap(), m);
        let x = seeded_random_matrix(6, 16, 1, 1.0).unwrap();
        let mut p = m.prefill(&x).unwrap();
        let mut cache = p.cache.clone();
        cache.apply_eviction(&EvictionDecision::new(0, vec![0, 3, 5]).unwrap()).unwrap();
        let step = m.decode_step(&mut cache, x.row(2)).unwrap();
        p.trace.push_decode(&step);
        assert_eq!(AttentionTrace::from_bundle(&p.trace.to_bundle()).unwrap(), p.trace);
    }
}
