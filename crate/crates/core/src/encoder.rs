//! Set-encoder mapping a variable number of UE feature rows to one fixed-size
//! state vector.
//!
//! Rows are projected to `d`, passed through post-norm self-attention blocks
//! and mean-pooled. There are no positional encodings, so the output is
//! invariant to the order of UEs. An empty cell maps to a learned vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    Activation, FeedForward, Graph, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamGroup,
    ParamId, ParamStore, Tensor, Var,
};
use crate::types::{target_for, QosTarget, UeObservation, NUM_FEATURES};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub f_in: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_ffn")]
    pub ffn_hidden: usize,
}

fn default_d() -> usize {
    64
}
fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    4
}
fn default_ffn() -> usize {
    128
}

impl EncoderConfig {
    /// Defaults (d=64, 2 layers, 4 heads, FFN 128) for a given input width.
    pub fn with_input(f_in: usize) -> Self {
        EncoderConfig {
            f_in,
            d: default_d(),
            layers: default_layers(),
            heads: default_heads(),
            ffn_hidden: default_ffn(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.f_in == 0 || self.d == 0 || self.heads == 0 || self.ffn_hidden == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        if self.d % self.heads != 0 {
            return Err(Error::config(format!(
                "embedding dim {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

/// Fixed-size state produced by an encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedState {
    pub vector: Vec<f64>,
    pub k_seen: usize,
    /// True when the cell was empty and the learned empty-state vector was used.
    pub empty: bool,
}

/// Layout of the augmented per-UE input: standardized KPIs, then a one-hot of
/// the slice position, then the slice's targets scaled by reference values.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureLayout {
    pub slices: Vec<QosTarget>,
    pub q_ref_mbps: f64,
    pub d_ref_ms: f64,
}

impl FeatureLayout {
    pub fn new(slices: Vec<QosTarget>) -> Self {
        FeatureLayout {
            slices,
            q_ref_mbps: 10.0,
            d_ref_ms: 100.0,
        }
    }

    pub fn width(&self) -> usize {
        NUM_FEATURES + self.slices.len() + 2
    }
}

pub const NORM_CLIP: f64 = 5.0;
const NORM_EPS: f64 = 1e-8;

/// Running per-feature mean/variance (Welford), stored in the parameter store
/// so it travels with checkpoints.
#[derive(Clone, Debug)]
pub struct FeatureNormalizer {
    mean: ParamId,
    m2: ParamId,
    count: ParamId,
}

impl FeatureNormalizer {
    pub fn new(store: &mut ParamStore) -> Self {
        FeatureNormalizer {
            mean: store.add("norm.mean", ParamGroup::Frozen, Tensor::zeros(1, NUM_FEATURES)),
            m2: store.add("norm.m2", ParamGroup::Frozen, Tensor::zeros(1, NUM_FEATURES)),
            count: store.add("norm.count", ParamGroup::Frozen, Tensor::zeros(1, 1)),
        }
    }

    pub fn count(&self, store: &ParamStore) -> f64 {
        store.value(self.count).item()
    }

    pub fn update(&self, store: &mut ParamStore, raw: &[f64; NUM_FEATURES]) {
        let n = store.value(self.count).item() + 1.0;
        store.value_mut(self.count).data_mut()[0] = n;
        let mut deltas = [0.0; NUM_FEATURES];
        {
            let mean = store.value_mut(self.mean).data_mut();
            for k in 0..NUM_FEATURES {
                deltas[k] = raw[k] - mean[k];
                mean[k] += deltas[k] / n;
            }
        }
        let mean = store.value(self.mean).data().to_vec();
        let m2 = store.value_mut(self.m2).data_mut();
        for k in 0..NUM_FEATURES {
            m2[k] += deltas[k] * (raw[k] - mean[k]);
        }
    }

    pub fn variance(&self, store: &ParamStore) -> Vec<f64> {
        let n = self.count(store);
        store
            .value(self.m2)
            .data()
            .iter()
            .map(|m| if n > 0.0 { (m / n).max(0.0) } else { 0.0 })
            .collect()
    }

    /// Standardize, clip to ±5 and append the slice one-hot and scaled targets.
    pub fn normalize(&self, store: &ParamStore, ue: &UeObservation, layout: &FeatureLayout) -> Result<Vec<f64>> {
        let mean = store.value(self.mean).data();
        let var = self.variance(store);
        let mut out = Vec::with_capacity(layout.width());
        for k in 0..NUM_FEATURES {
            let z = (ue.features[k] - mean[k]) / (var[k] + NORM_EPS).sqrt();
            out.push(z.clamp(-NORM_CLIP, NORM_CLIP));
        }
        let pos = layout
            .slices
            .iter()
            .position(|s| s.slice_id == ue.slice_id)
            .ok_or_else(|| Error::config(format!("no QoS target for slice {}", ue.slice_id)))?;
        out.extend((0..layout.slices.len()).map(|i| if i == pos { 1.0 } else { 0.0 }));
        let t = target_for(&layout.slices, ue.slice_id)?;
        out.push(t.q_target_mbps / layout.q_ref_mbps);
        out.push(t.d_target_ms / layout.d_ref_ms);
        Ok(out)
    }
}

/// One post-norm encoder block: attention + residual + norm, FFN + residual + norm.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderBlock {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let a = self.attention.forward(g, store, x);
        let h = g.add(x, a);
        let h = self.norm1.forward(g, store, h);
        let f = self.ffn.forward(g, store, h);
        let h2 = g.add(h, f);
        self.norm2.forward(g, store, h2)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub cfg: EncoderConfig,
    pub projection: Linear,
    pub blocks: Vec<EncoderBlock>,
    pub empty: ParamId,
}

impl TransformerEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        cfg: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let projection = Linear::new(store, &format!("{name}.proj"), group, cfg.f_in, cfg.d, rng);
        let blocks = (0..cfg.layers)
            .map(|l| EncoderBlock {
                attention: MultiHeadAttention::new(store, &format!("{name}.{l}.attn"), group, cfg.d, cfg.heads, rng),
                norm1: LayerNorm::new(store, &format!("{name}.{l}.norm1"), group, cfg.d),
                ffn: FeedForward::new(store, &format!("{name}.{l}.ffn"), group, cfg.d, cfg.ffn_hidden, rng),
                norm2: LayerNorm::new(store, &format!("{name}.{l}.norm2"), group, cfg.d),
            })
            .collect();
        let empty = store.add(format!("{name}.empty"), group, Tensor::zeros(1, cfg.d));
        Ok(TransformerEncoder {
            cfg,
            projection,
            blocks,
            empty,
        })
    }

    /// Per-UE contextual embeddings `K x d` (K ≥ 1).
    pub fn embed_rows(&self, g: &mut Graph, store: &ParamStore, rows: Var) -> Var {
        let mut h = self.projection.forward(g, store, rows);
        for block in &self.blocks {
            h = block.forward(g, store, h);
        }
        h
    }
}

/// Ablation encoder: mean-pool the raw rows first, then a 2-layer MLP to `d`.
#[derive(Clone, Debug)]
pub struct MeanPoolMlp {
    pub mlp: Mlp,
    pub empty: ParamId,
    pub d: usize,
}

impl MeanPoolMlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        f_in: usize,
        d: usize,
        rng: &mut R,
    ) -> Self {
        MeanPoolMlp {
            mlp: Mlp::new(store, &format!("{name}.mlp"), group, &[f_in, d, d], Activation::Tanh, rng),
            empty: store.add(format!("{name}.empty"), group, Tensor::zeros(1, d)),
            d,
        }
    }
}

/// Either the attention encoder or its mean-pool ablation.
#[derive(Clone, Debug)]
pub enum StateEncoder {
    Transformer(TransformerEncoder),
    MeanPool(MeanPoolMlp),
}

impl StateEncoder {
    pub fn output_dim(&self) -> usize {
        match self {
            StateEncoder::Transformer(t) => t.cfg.d,
            StateEncoder::MeanPool(m) => m.d,
        }
    }

    /// `rows: K x f_in` -> `1 x d`. `K = 0` yields the learned empty-state vector.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, rows: &Tensor) -> Var {
        match self {
            StateEncoder::Transformer(t) => {
                if rows.rows() == 0 {
                    return g.param(store, t.empty);
                }
                let x = g.input(rows.clone());
                let h = t.embed_rows(g, store, x);
                g.mean_rows(h)
            }
            StateEncoder::MeanPool(m) => {
                if rows.rows() == 0 {
                    return g.param(store, m.empty);
                }
                let x = g.input(rows.clone());
                let pooled = g.mean_rows(x);
                m.mlp.forward(g, store, pooled)
            }
        }
    }

    /// Value-level encoding.
    pub fn encode(&self, store: &ParamStore, rows: &Tensor) -> Result<EncodedState> {
        let mut g = Graph::new();
        let v = self.forward(&mut g, store, rows);
        g.check_finite()?;
        Ok(EncodedState {
            vector: g.value(v).data().to_vec(),
            k_seen: rows.rows(),
            empty: rows.rows() == 0,
        })
    }
}
