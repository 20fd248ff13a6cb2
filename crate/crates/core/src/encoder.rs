//! Post-layer-norm BERT-style encoder forward pass with FFN activation
//! capture, masked FFN evaluation and the per-layer feature-map loss.

use std::fs;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{affine, frobenius, matmul_f64};
use crate::tensorstore::{
    as_matrix, matrix_tensor, take, Container, LayerNormParams, LayerWeights, ModelBundle, ModelConfig,
    TokenBatch,
};

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const CAPTURE_META_FILE: &str = "capture.meta.json";

/// Exact GELU, `x · Φ(x)`, evaluated in f64.
pub fn gelu(x: f32) -> f32 {
    gelu_f64(f64::from(x)) as f32
}

pub fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Binary filter mask with per-filter output scales.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterMask {
    /// L × N
    pub mask: Array2<bool>,
    /// L × N; ignored where the mask is off.
    pub scales: Array2<f32>,
}

impl FilterMask {
    pub fn ones(layers: usize, filters: usize) -> Self {
        Self {
            mask: Array2::from_elem((layers, filters), true),
            scales: Array2::ones((layers, filters)),
        }
    }

    pub fn zeros(layers: usize, filters: usize) -> Self {
        Self {
            mask: Array2::from_elem((layers, filters), false),
            scales: Array2::ones((layers, filters)),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.mask.nrows()
    }

    pub fn num_filters(&self) -> usize {
        self.mask.ncols()
    }

    pub fn active_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Retained filters per layer.
    pub fn per_layer_counts(&self) -> Vec<usize> {
        self.mask
            .axis_iter(Axis(0))
            .map(|row| row.iter().filter(|m| **m).count())
            .collect()
    }

    pub fn active_indices(&self, layer: usize) -> Vec<usize> {
        self.mask
            .row(layer)
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.then_some(i))
            .collect()
    }

    /// Effective per-filter multiplier `m_i · s_i` for one layer.
    pub fn coefficients(&self, layer: usize) -> Vec<f32> {
        self.mask
            .row(layer)
            .iter()
            .zip(self.scales.row(layer))
            .map(|(&m, &s)| if m { s } else { 0.0 })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mask.dim() != self.scales.dim() {
            return Err(Error::shape(
                "mask.scales",
                format!("mask is {:?} but scales are {:?}", self.mask.dim(), self.scales.dim()),
            ));
        }
        if self.scales.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                tensor: "mask.scales".into(),
            });
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let m = self.mask.mapv(|b| if b { 1.0f32 } else { 0.0 });
        Container {
            config: None,
            metadata: None,
            tensors: vec![
                matrix_tensor("mask.m", m.view()),
                matrix_tensor("mask.scales", self.scales.view()),
            ],
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let m = as_matrix(take(c, "mask.m")?)?;
        if m.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::Validation("mask.m entries must be 0 or 1".into()));
        }
        let mask = Self {
            mask: m.mapv(|v| v == 1.0),
            scales: as_matrix(take(c, "mask.scales")?)?,
        };
        mask.validate()?;
        Ok(mask)
    }
}

/// FFN result with the intermediates the capture needs.
#[derive(Debug, Clone)]
pub struct FfnOutput {
    /// Post-activation `H = σ(x·W1 + b1)`, T × N.
    pub hidden: Array2<f32>,
    /// `(H ∘ c)·W2` without the output bias, T × d.
    pub projected: Array2<f32>,
    /// `projected + b2`, T × d.
    pub output: Array2<f32>,
}

fn check_ffn_input(layer: &LayerWeights, x: ArrayView2<'_, f32>) -> Result<()> {
    if x.ncols() != layer.hidden_dim() {
        return Err(Error::shape(
            "ffn.input",
            format!("input has {} columns, layer expects {}", x.ncols(), layer.hidden_dim()),
        ));
    }
    Ok(())
}

/// Shared FFN kernel. With `coeffs = None` this is the dense FFN; otherwise
/// column `i` of `H` is multiplied by `coeffs[i]` before the output
/// projection. A coefficient of exactly 1.0 leaves the arithmetic unchanged.
pub fn ffn_forward(layer: &LayerWeights, x: ArrayView2<'_, f32>, coeffs: Option<&[f32]>) -> Result<FfnOutput> {
    check_ffn_input(layer, x)?;
    let n = layer.num_filters();
    if let Some(c) = coeffs {
        if c.len() != n {
            return Err(Error::shape(
                "ffn.mask",
                format!("mask row has {} entries, layer has {n} filters", c.len()),
            ));
        }
    }
    let hidden = affine(x, layer.w1.view(), layer.b1.view()).mapv(gelu);
    let projected = match coeffs {
        None => matmul_f64(hidden.view(), layer.w2.view()),
        Some(c) => {
            let mut scaled = hidden.clone();
            for mut row in scaled.rows_mut() {
                for (v, &ci) in row.iter_mut().zip(c) {
                    *v *= ci;
                }
            }
            matmul_f64(scaled.view(), layer.w2.view())
        }
    };
    let mut output = projected.clone();
    for mut row in output.rows_mut() {
        for (o, &b) in row.iter_mut().zip(layer.b2.iter()) {
            *o += f64::from(b);
        }
    }
    Ok(FfnOutput {
        hidden,
        projected: projected.mapv(|v| v as f32),
        output: output.mapv(|v| v as f32),
    })
}

/// `σ(x·W1 + b1)·W2 + b2`.
pub fn ffn_dense(layer: &LayerWeights, x: ArrayView2<'_, f32>) -> Result<Array2<f32>> {
    Ok(ffn_forward(layer, x, None)?.output)
}

/// Masked FFN: `Σ_i σ(x·W1[:,i] + b1_i) · s_i · m_i · W2[i,:] + b2`.
pub fn ffn_masked(
    layer: &LayerWeights,
    x: ArrayView2<'_, f32>,
    mask: &[bool],
    scales: &[f32],
) -> Result<Array2<f32>> {
    if mask.len() != scales.len() {
        return Err(Error::shape(
            "ffn.mask",
            format!("{} mask entries but {} scales", mask.len(), scales.len()),
        ));
    }
    let coeffs: Vec<f32> = mask
        .iter()
        .zip(scales)
        .map(|(&m, &s)| if m { s } else { 0.0 })
        .collect();
    Ok(ffn_forward(layer, x, Some(&coeffs))?.output)
}

/// Frobenius norm of the difference between the dense and masked FFN outputs
/// over the captured tokens, `‖H · diag(1 − m∘s) · W2‖_F`. The output bias
/// cancels in the difference.
pub fn feature_map_loss(layer: &LayerWeights, hidden: ArrayView2<'_, f32>, mask: &[bool], scales: &[f32]) -> Result<f64> {
    let n = layer.num_filters();
    if hidden.ncols() != n || mask.len() != n || scales.len() != n {
        return Err(Error::shape(
            "feature_map_loss",
            format!(
                "layer has {n} filters; capture has {}, mask {}, scales {}",
                hidden.ncols(),
                mask.len(),
                scales.len()
            ),
        ));
    }
    let residual: Vec<f64> = mask
        .iter()
        .zip(scales)
        .map(|(&m, &s)| if m { 1.0 - f64::from(s) } else { 1.0 })
        .collect();
    let mut weighted = hidden.mapv(f64::from);
    for mut row in weighted.rows_mut() {
        for (v, r) in row.iter_mut().zip(&residual) {
            *v *= r;
        }
    }
    if n == 0 {
        return Ok(0.0);
    }
    let diff = weighted.dot(&layer.w2.mapv(f64::from));
    Ok(frobenius(diff.view()))
}

/// Per-layer feature-map losses of `mask` against a capture, plus their sum.
pub fn feature_map_losses(bundle: &ModelBundle, capture: &ActivationCapture, mask: &FilterMask) -> Result<(Vec<f64>, f64)> {
    let per_layer = bundle
        .layers
        .par_iter()
        .enumerate()
        .map(|(l, layer)| {
            let m: Vec<bool> = mask.mask.row(l).to_vec();
            let s: Vec<f32> = mask.scales.row(l).to_vec();
            feature_map_loss(layer, capture.hidden[l].view(), &m, &s)
        })
        .collect::<Result<Vec<f64>>>()?;
    let total = per_layer.iter().sum();
    Ok((per_layer, total))
}

/// Per-layer FFN activations collected over the real tokens of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCapture {
    /// Per layer, T × N post-activation matrix.
    pub hidden: Vec<Array2<f32>>,
    /// Per layer, T × d dense FFN output without `b2`, i.e. `H · W2`.
    pub projected: Vec<Array2<f32>>,
    /// Number of captured (real) token positions.
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureMeta {
    #[serde(rename = "T")]
    pub tokens: usize,
    pub model_hash: String,
    pub sample_hash: String,
}

impl ActivationCapture {
    pub fn num_layers(&self) -> usize {
        self.hidden.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.len() != self.projected.len() {
            return Err(Error::Validation("capture has mismatched layer counts".into()));
        }
        for (l, (h, y)) in self.hidden.iter().zip(&self.projected).enumerate() {
            if h.nrows() != self.tokens || y.nrows() != self.tokens {
                return Err(Error::shape(
                    format!("capture.layer.{l}"),
                    format!("expected {} rows, found h1 {} / y {}", self.tokens, h.nrows(), y.nrows()),
                ));
            }
            if h.iter().chain(y.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    tensor: format!("capture.layer.{l}"),
                });
            }
        }
        Ok(())
    }

    /// Writes the capture as a container plus `capture.meta.json`.
    pub fn save(&self, dir: &Path, model_hash: &str, sample_hash: &str) -> Result<()> {
        let mut tensors = Vec::with_capacity(2 * self.hidden.len());
        for (l, (h, y)) in self.hidden.iter().zip(&self.projected).enumerate() {
            tensors.push(matrix_tensor(format!("capture.layer.{l}.h1"), h.view()));
            tensors.push(matrix_tensor(format!("capture.layer.{l}.y"), y.view()));
        }
        Container {
            config: None,
            metadata: None,
            tensors,
        }
        .write(dir)?;
        let meta = CaptureMeta {
            tokens: self.tokens,
            model_hash: model_hash.to_string(),
            sample_hash: sample_hash.to_string(),
        };
        let path = dir.join(CAPTURE_META_FILE);
        let json = serde_json::to_vec_pretty(&meta).map_err(|e| Error::Manifest(e.to_string()))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<(Self, CaptureMeta)> {
        let path = dir.join(CAPTURE_META_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CaptureMeta = serde_json::from_slice(&bytes).map_err(|e| Error::Manifest(e.to_string()))?;
        let c = Container::read(dir)?;
        let layers = c.tensors.len() / 2;
        let mut hidden = Vec::with_capacity(layers);
        let mut projected = Vec::with_capacity(layers);
        for l in 0..layers {
            hidden.push(as_matrix(take(&c, &format!("capture.layer.{l}.h1"))?)?);
            projected.push(as_matrix(take(&c, &format!("capture.layer.{l}.y"))?)?);
        }
        let capture = Self {
            hidden,
            projected,
            tokens: meta.tokens,
        };
        capture.validate()?;
        Ok((capture, meta))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    /// Record `H` and `H·W2` per layer.
    pub capture: bool,
    /// Record the FFN input (post-attention layer norm output) per layer.
    pub ffn_inputs: bool,
    /// Evaluate every FFN with this mask and its scales.
    pub mask: Option<&'a FilterMask>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Final hidden states per sequence, one row per real token.
    pub hidden_states: Vec<Array2<f32>>,
    pub capture: Option<ActivationCapture>,
    /// Per layer, T × d FFN inputs over the real tokens.
    pub ffn_inputs: Option<Vec<Array2<f32>>>,
}

struct SequenceTrace {
    output: Array2<f32>,
    hidden: Vec<Array2<f32>>,
    projected: Vec<Array2<f32>>,
    ffn_inputs: Vec<Array2<f32>>,
}

fn layer_norm(x: &Array2<f32>, ln: &LayerNormParams) -> Array2<f32> {
    let mut out = Array2::zeros(x.dim());
    for (row, mut dst) in x.rows().into_iter().zip(out.rows_mut()) {
        let d = row.len() as f64;
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / d;
        let var = row.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for ((o, &v), (&g, &b)) in dst.iter_mut().zip(row).zip(ln.gain.iter().zip(ln.bias.iter())) {
            *o = ((f64::from(v) - mean) * inv * f64::from(g) + f64::from(b)) as f32;
        }
    }
    out
}

fn add(a: &Array2<f32>, b: &Array2<f32>) -> Array2<f32> {
    a + b
}

fn self_attention(layer: &LayerWeights, x: &Array2<f32>, config: &ModelConfig) -> Array2<f32> {
    let q = affine(x.view(), layer.wq.view(), layer.bq.view());
    let k = affine(x.view(), layer.wk.view(), layer.bk.view());
    let v = affine(x.view(), layer.wv.view(), layer.bv.view());
    let t = x.nrows();
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Array2::<f32>::zeros((t, config.hidden_dim));
    for head in 0..config.num_heads {
        let cols = s![.., head * dh..(head + 1) * dh];
        let (qh, kh, vh) = (q.slice(cols), k.slice(cols), v.slice(cols));
        let scores = matmul_f64(qh, kh.t()) * scale;
        let vh64 = vh.mapv(f64::from);
        let mut probs = scores;
        for mut row in probs.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|s| (s - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|p| p / sum);
        }
        let out = probs.dot(&vh64);
        ctx.slice_mut(cols).assign(&out.mapv(|v| v as f32));
    }
    affine(ctx.view(), layer.wo.view(), layer.bo.view())
}

fn run_sequence(
    bundle: &ModelBundle,
    ids: &[u32],
    positions: &[usize],
    opts: &ForwardOptions<'_>,
) -> Result<SequenceTrace> {
    let cfg = &bundle.config;
    let emb = &bundle.embeddings;
    let d = cfg.hidden_dim;
    let mut x = Array2::<f32>::zeros((ids.len(), d));
    for (r, (&id, &p)) in ids.iter().zip(positions).enumerate() {
        let mut row = x.row_mut(r);
        row.assign(&emb.token.row(id as usize));
        row += &emb.position.row(p);
        if let Some(seg) = &emb.segment {
            row += &seg.row(0);
        }
    }
    let mut x = layer_norm(&x, &emb.ln);

    let mut trace = SequenceTrace {
        output: Array2::zeros((0, d)),
        hidden: Vec::new(),
        projected: Vec::new(),
        ffn_inputs: Vec::new(),
    };
    for (l, layer) in bundle.layers.iter().enumerate() {
        let attn = self_attention(layer, &x, cfg);
        let x1 = layer_norm(&add(&x, &attn), &layer.ln_attn);
        let coeffs = opts.mask.map(|m| m.coefficients(l));
        let ffn = ffn_forward(layer, x1.view(), coeffs.as_deref())?;
        x = layer_norm(&add(&x1, &ffn.output), &layer.ln_ffn);
        if opts.ffn_inputs {
            trace.ffn_inputs.push(x1);
        }
        if opts.capture {
            trace.hidden.push(ffn.hidden);
            trace.projected.push(ffn.projected);
        }
    }
    trace.output = x;
    Ok(trace)
}

fn concat_rows(parts: Vec<Array2<f32>>, cols: usize) -> Array2<f32> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    if views.is_empty() {
        return Array2::zeros((0, cols));
    }
    ndarray::concatenate(Axis(0), &views).expect("equal column counts")
}

/// Runs the encoder over every sequence of `batch`.
///
/// Only real (non-padding) positions are fed through the model: padded
/// positions are excluded as attention keys, so their presence never changes
/// real-token outputs, and no rows are emitted for them. Captured rows are
/// ordered by sequence, then position.
pub fn forward(bundle: &ModelBundle, batch: &TokenBatch, opts: ForwardOptions<'_>) -> Result<ForwardOutput> {
    batch.validate(&bundle.config)?;
    if let Some(mask) = opts.mask {
        mask.validate()?;
        let widths = bundle.layer_widths();
        if mask.num_layers() != widths.len() || widths.iter().any(|&w| w != mask.num_filters()) {
            return Err(Error::shape(
                "mask",
                format!("mask is {:?} but layer widths are {widths:?}", mask.mask.dim()),
            ));
        }
    }

    let traces = batch
        .sequences
        .par_iter()
        .map(|seq| {
            let (ids, positions): (Vec<u32>, Vec<usize>) = seq
                .ids
                .iter()
                .zip(&seq.real)
                .enumerate()
                .filter(|(_, (_, real))| **real)
                .map(|(p, (&id, _))| (id, p))
                .unzip();
            run_sequence(bundle, &ids, &positions, &opts)
        })
        .collect::<Result<Vec<_>>>()?;

    let tokens: usize = traces.iter().map(|t| t.output.nrows()).sum();
    let num_layers = bundle.layers.len();
    let d = bundle.config.hidden_dim;

    let mut hidden_states = Vec::with_capacity(traces.len());
    let mut hidden_parts: Vec<Vec<Array2<f32>>> = vec![Vec::new(); num_layers];
    let mut projected_parts: Vec<Vec<Array2<f32>>> = vec![Vec::new(); num_layers];
    let mut input_parts: Vec<Vec<Array2<f32>>> = vec![Vec::new(); num_layers];
    for trace in traces {
        hidden_states.push(trace.output);
        for (l, h) in trace.hidden.into_iter().enumerate() {
            hidden_parts[l].push(h);
        }
        for (l, y) in trace.projected.into_iter().enumerate() {
            projected_parts[l].push(y);
        }
        for (l, x) in trace.ffn_inputs.into_iter().enumerate() {
            input_parts[l].push(x);
        }
    }

    let capture = opts.capture.then(|| ActivationCapture {
        hidden: hidden_parts
            .into_iter()
            .zip(bundle.layer_widths())
            .map(|(p, n)| concat_rows(p, n))
            .collect(),
        projected: projected_parts.into_iter().map(|p| concat_rows(p, d)).collect(),
        tokens,
    });
    let ffn_inputs = opts
        .ffn_inputs
        .then(|| input_parts.into_iter().map(|p| concat_rows(p, d)).collect());
    Ok(ForwardOutput {
        hidden_states,
        capture,
        ffn_inputs,
    })
}

/// Convenience wrapper: forward with capture enabled.
pub fn capture_activations(bundle: &ModelBundle, batch: &TokenBatch) -> Result<ActivationCapture> {
    let out = forward(
        bundle,
        batch,
        ForwardOptions {
            capture: true,
            ..Default::default()
        },
    )?;
    Ok(out.capture.expect("capture requested"))
}
