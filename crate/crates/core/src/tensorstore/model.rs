//! In-memory encoder model.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    GeluExact,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    /// Filters per FFN layer of the dense model.
    pub num_filters: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub activation: Activation,
    /// Present only on compacted models whose layers have ragged FFN widths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_layer_filters: Option<Vec<usize>>,
}

impl ModelConfig {
    pub fn new(
        num_layers: usize,
        hidden_dim: usize,
        num_filters: usize,
        num_heads: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Self {
        Self {
            num_layers,
            hidden_dim,
            num_filters,
            num_heads,
            vocab_size,
            max_seq_len,
            activation: Activation::GeluExact,
            per_layer_filters: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_filters", self.num_filters),
            ("num_heads", self.num_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Validation(format!("config.{name} must be positive")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Validation(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if let Some(widths) = &self.per_layer_filters {
            if widths.len() != self.num_layers {
                return Err(Error::Validation(format!(
                    "per_layer_filters has {} entries, expected {}",
                    widths.len(),
                    self.num_layers
                )));
            }
        }
        Ok(())
    }

    /// FFN width of layer `layer` (ragged for compacted models).
    pub fn layer_filters(&self, layer: usize) -> usize {
        match &self.per_layer_filters {
            Some(w) => w[layer],
            None => self.num_filters,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Array1<f32>,
    pub bias: Array1<f32>,
}

impl LayerNormParams {
    pub fn identity(d: usize) -> Self {
        Self {
            gain: Array1::ones(d),
            bias: Array1::zeros(d),
        }
    }
}

/// Weights of one encoder block. Projections are stored input-major, so a
/// row vector `x` maps to `x · w`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// d × N
    pub w1: Array2<f32>,
    /// N
    pub b1: Array1<f32>,
    /// N × d
    pub w2: Array2<f32>,
    /// d
    pub b2: Array1<f32>,
    pub wq: Array2<f32>,
    pub bq: Array1<f32>,
    pub wk: Array2<f32>,
    pub bk: Array1<f32>,
    pub wv: Array2<f32>,
    pub bv: Array1<f32>,
    pub wo: Array2<f32>,
    pub bo: Array1<f32>,
    /// Post-attention layer norm.
    pub ln_attn: LayerNormParams,
    /// Post-FFN layer norm.
    pub ln_ffn: LayerNormParams,
}

impl LayerWeights {
    pub fn num_filters(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    /// vocab_size × d
    pub token: Array2<f32>,
    /// max_seq_len × d
    pub position: Array2<f32>,
    /// Optional segment table; row 0 is added to every token when present.
    pub segment: Option<Array2<f32>>,
    pub ln: LayerNormParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub embeddings: Embeddings,
    pub layers: Vec<LayerWeights>,
}

fn check_matrix(name: &str, a: &Array2<f32>, rows: usize, cols: usize) -> Result<()> {
    if a.dim() != (rows, cols) {
        return Err(Error::shape(
            name,
            format!("expected [{rows}, {cols}], found [{}, {}]", a.nrows(), a.ncols()),
        ));
    }
    check_finite(name, a.iter())
}

fn check_vector(name: &str, a: &Array1<f32>, len: usize) -> Result<()> {
    if a.len() != len {
        return Err(Error::shape(name, format!("expected [{len}], found [{}]", a.len())));
    }
    check_finite(name, a.iter())
}

fn check_finite<'a>(name: &str, mut values: impl Iterator<Item = &'a f32>) -> Result<()> {
    if values.all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { tensor: name.to_string() })
    }
}

impl ModelBundle {
    /// Checks every invariant: config sanity, layer count, tensor shapes and
    /// finiteness. Errors name the offending tensor.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        if self.layers.len() != cfg.num_layers {
            return Err(Error::Validation(format!(
                "model has {} layers but config declares {}",
                self.layers.len(),
                cfg.num_layers
            )));
        }
        let d = cfg.hidden_dim;
        let e = &self.embeddings;
        check_matrix("embed.token", &e.token, cfg.vocab_size, d)?;
        check_matrix("embed.position", &e.position, cfg.max_seq_len, d)?;
        if let Some(seg) = &e.segment {
            if seg.nrows() == 0 {
                return Err(Error::shape("embed.segment", "segment table has no rows"));
            }
            check_matrix("embed.segment", seg, seg.nrows(), d)?;
        }
        check_vector("embed.ln_gain", &e.ln.gain, d)?;
        check_vector("embed.ln_bias", &e.ln.bias, d)?;

        for (i, layer) in self.layers.iter().enumerate() {
            let n = cfg.layer_filters(i);
            let name = |t: &str| format!("layer.{i}.{t}");
            check_matrix(&name("w1"), &layer.w1, d, n)?;
            check_vector(&name("b1"), &layer.b1, n)?;
            check_matrix(&name("w2"), &layer.w2, n, d)?;
            check_vector(&name("b2"), &layer.b2, d)?;
            for (t, w, b) in [
                ("q", &layer.wq, &layer.bq),
                ("k", &layer.wk, &layer.bk),
                ("v", &layer.wv, &layer.bv),
                ("o", &layer.wo, &layer.bo),
            ] {
                check_matrix(&name(&format!("w{t}")), w, d, d)?;
                check_vector(&name(&format!("b{t}")), b, d)?;
            }
            check_vector(&name("ln_attn_gain"), &layer.ln_attn.gain, d)?;
            check_vector(&name("ln_attn_bias"), &layer.ln_attn.bias, d)?;
            check_vector(&name("ln_ffn_gain"), &layer.ln_ffn.gain, d)?;
            check_vector(&name("ln_ffn_bias"), &layer.ln_ffn.bias, d)?;
        }
        Ok(())
    }

    /// Per-layer FFN widths.
    pub fn layer_widths(&self) -> Vec<usize> {
        self.layers.iter().map(LayerWeights::num_filters).collect()
    }
}
