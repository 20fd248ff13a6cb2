//! Least-squares rescaling of surviving filters and physical compaction.
//!
//! For a layer with captured activations `H` (T × N), dense projection
//! `Y = H·W2` (T × d, recomputed in f64) and active set `A`, the scales solve
//!
//! ```text
//! min_s ‖ Σ_{i∈A} s_i · H[:,i] ⊗ W2[i,:] − Y ‖²_F + λ‖s − 1‖²
//! ```
//!
//! through the |A| × |A| normal equations `G s = b + λ·1` with
//! `G[i,j] = (H[:,i]·H[:,j]) (W2[i,:]·W2[j,:]) + λ δ_ij` and
//! `b[i] = Σ_t H[t,i] (Y[t,:]·W2[i,:])`.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{feature_map_loss, forward, ActivationCapture, FilterMask, ForwardOptions};
use crate::error::{Error, Result};
use crate::linalg::max_abs_diff;
use crate::tensorstore::{LayerWeights, ModelBundle, TokenBatch};

/// Pivot ratio `L_ii² / G_ii` below which the system is treated as singular.
const SINGULAR_PIVOT: f64 = 1e-12;
/// Fallback ridge, relative to the mean diagonal of `G`.
const FALLBACK_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSolution {
    /// One scale per active filter, in active-set order.
    pub scales: Vec<f64>,
    /// Ridge actually applied.
    pub ridge: f64,
    /// Set when the unregularized system was singular and the fallback
    /// ridge was used.
    pub fallback: bool,
}

/// Normal-equation Gram matrix and right-hand side (both without ridge).
pub fn normal_equations(
    layer: &LayerWeights,
    hidden: ArrayView2<'_, f32>,
    active: &[usize],
) -> (Array2<f64>, Array1<f64>) {
    let h_full = hidden.mapv(f64::from);
    let w_full = layer.w2.mapv(f64::from);
    let h = h_full.select(Axis(1), active);
    let w = w_full.select(Axis(0), active);
    let hth = h.t().dot(&h);
    let wwt = w.dot(&w.t());
    let gram = &hth * &wwt;
    // Y·W_Aᵀ = H·(W2·W_Aᵀ), kept in f64 so the fit minimizes the reported loss
    let yw = h_full.dot(&w_full.dot(&w.t()));
    let rhs = (&h * &yw).sum_axis(Axis(0));
    (gram, rhs)
}

fn cholesky_solve(gram: &Array2<f64>, rhs: &Array1<f64>) -> Option<Vec<f64>> {
    let n = gram.nrows();
    let g = DMatrix::from_fn(n, n, |i, j| gram[[i, j]]);
    let chol = g.clone().cholesky()?;
    let l = chol.l();
    for i in 0..n {
        let g_ii = g[(i, i)];
        if g_ii <= 0.0 || l[(i, i)] * l[(i, i)] <= SINGULAR_PIVOT * g_ii {
            return None;
        }
    }
    let x = chol.solve(&DVector::from_iterator(n, rhs.iter().copied()));
    x.iter().all(|v| v.is_finite()).then(|| x.iter().copied().collect())
}

/// Solves for the scales of `active` filters. With `ridge = 0` and a singular
/// system, falls back to `1e-8 · mean(diag G)` and flags the result.
pub fn fit_scales(
    layer: &LayerWeights,
    hidden: ArrayView2<'_, f32>,
    active: &[usize],
    ridge: f64,
) -> Result<ScaleSolution> {
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::Validation(format!("ridge {ridge} must be nonnegative")));
    }
    if hidden.nrows() == 0 {
        return Err(Error::Validation("cannot fit scales without captured tokens".into()));
    }
    if hidden.ncols() != layer.num_filters() {
        return Err(Error::shape(
            "fit_scales",
            format!(
                "capture h1 {:?} does not match layer with {} filters",
                hidden.dim(),
                layer.num_filters()
            ),
        ));
    }
    if let Some(&bad) = active.iter().find(|&&i| i >= layer.num_filters()) {
        return Err(Error::Validation(format!("active filter {bad} out of range")));
    }
    if active.is_empty() {
        return Ok(ScaleSolution {
            scales: Vec::new(),
            ridge,
            fallback: false,
        });
    }
    if active.iter().copied().eq(0..layer.num_filters()) {
        // nothing removed: unit scales are exact
        return Ok(ScaleSolution {
            scales: vec![1.0; active.len()],
            ridge,
            fallback: false,
        });
    }

    let (gram, rhs) = normal_equations(layer, hidden, active);
    let solve_with = |lambda: f64| {
        let mut g = gram.clone();
        g.diag_mut().mapv_inplace(|v| v + lambda);
        let b = rhs.mapv(|v| v + lambda);
        cholesky_solve(&g, &b)
    };

    if let Some(scales) = solve_with(ridge) {
        return Ok(ScaleSolution {
            scales,
            ridge,
            fallback: false,
        });
    }
    let mean_diag = gram.diag().mean().unwrap_or(0.0);
    let mut fallback = ridge.max(FALLBACK_RIDGE * mean_diag);
    if fallback <= 0.0 {
        // every active filter is silent on the capture; keep unit scales
        fallback = 1.0;
    }
    let scales = solve_with(fallback).ok_or_else(|| {
        Error::Validation(format!("scale system singular even with ridge {fallback:e}"))
    })?;
    Ok(ScaleSolution {
        scales,
        ridge: fallback,
        fallback: true,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFit {
    pub active: usize,
    /// Feature-map loss with unit scales.
    pub loss_before: f64,
    /// Feature-map loss with the fitted scales.
    pub loss_after: f64,
    pub ridge: f64,
    pub fallback: bool,
}

/// Fits scales for every layer of `mask` (in parallel) and returns the mask
/// with scales filled in, plus per-layer diagnostics.
pub fn fit_all(
    bundle: &ModelBundle,
    capture: &ActivationCapture,
    mask: &FilterMask,
    ridge: f64,
) -> Result<(FilterMask, Vec<LayerFit>)> {
    if capture.num_layers() != bundle.layers.len() || mask.num_layers() != bundle.layers.len() {
        return Err(Error::Validation("capture, mask and model disagree on layer count".into()));
    }
    let fits = bundle
        .layers
        .par_iter()
        .enumerate()
        .map(|(l, layer)| {
            let active = mask.active_indices(l);
            let m: Vec<bool> = mask.mask.row(l).to_vec();
            let unit = vec![1.0f32; mask.num_filters()];
            let loss_before = feature_map_loss(layer, capture.hidden[l].view(), &m, &unit)?;
            let sol = fit_scales(layer, capture.hidden[l].view(), &active, ridge)?;
            let mut scales = unit;
            for (&i, &s) in active.iter().zip(&sol.scales) {
                scales[i] = s as f32;
            }
            let loss_after = feature_map_loss(layer, capture.hidden[l].view(), &m, &scales)?;
            Ok((
                scales,
                LayerFit {
                    active: active.len(),
                    loss_before,
                    loss_after,
                    ridge: sol.ridge,
                    fallback: sol.fallback,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut fitted = mask.clone();
    let mut diagnostics = Vec::with_capacity(fits.len());
    for (l, (scales, fit)) in fits.into_iter().enumerate() {
        fitted.scales.row_mut(l).assign(&Array1::from(scales));
        diagnostics.push(fit);
    }
    Ok((fitted, diagnostics))
}

/// Removes masked-out filters and folds each survivor's scale into its `W2`
/// row. Layers may end up with different widths (including zero); those are
/// recorded in `config.per_layer_filters`.
pub fn apply_prune(bundle: &ModelBundle, mask: &FilterMask) -> Result<ModelBundle> {
    mask.validate()?;
    let widths = bundle.layer_widths();
    if mask.num_layers() != widths.len() || widths.iter().any(|&w| w != mask.num_filters()) {
        return Err(Error::shape(
            "mask",
            format!("mask is {:?} but layer widths are {widths:?}", mask.mask.dim()),
        ));
    }
    let mut pruned = bundle.clone();
    for (l, layer) in pruned.layers.iter_mut().enumerate() {
        let keep = mask.active_indices(l);
        let scales: Vec<f32> = keep.iter().map(|&i| mask.scales[[l, i]]).collect();
        layer.w1 = layer.w1.select(Axis(1), &keep);
        layer.b1 = layer.b1.select(Axis(0), &keep);
        let mut w2 = layer.w2.select(Axis(0), &keep);
        for (mut row, s) in w2.rows_mut().into_iter().zip(scales) {
            row.mapv_inplace(|v| v * s);
        }
        layer.w2 = w2;
    }
    let counts = mask.per_layer_counts();
    pruned.config.per_layer_filters = if counts.iter().all(|&c| c == bundle.config.num_filters) {
        None
    } else {
        Some(counts)
    };
    pruned.validate()?;
    Ok(pruned)
}

fn max_deviation(a: &[Array2<f32>], b: &[Array2<f32>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| max_abs_diff(x.view(), y.view()))
        .fold(0.0, f64::max)
}

/// Max-abs deviation of final hidden states between the original dense
/// model and the compacted model.
pub fn verify_equivalence(original: &ModelBundle, pruned: &ModelBundle, batch: &TokenBatch) -> Result<f64> {
    check_compatible(original, pruned)?;
    let a = forward(original, batch, ForwardOptions::default())?;
    let b = forward(pruned, batch, ForwardOptions::default())?;
    Ok(max_deviation(&a.hidden_states, &b.hidden_states))
}

/// Max-abs deviation between the original model evaluated with `mask` and
/// the compacted model. Zero up to rounding when compaction is sound.
pub fn compaction_deviation(
    original: &ModelBundle,
    mask: &FilterMask,
    pruned: &ModelBundle,
    batch: &TokenBatch,
) -> Result<f64> {
    check_compatible(original, pruned)?;
    let a = forward(
        original,
        batch,
        ForwardOptions {
            mask: Some(mask),
            ..Default::default()
        },
    )?;
    let b = forward(pruned, batch, ForwardOptions::default())?;
    Ok(max_deviation(&a.hidden_states, &b.hidden_states))
}

pub(crate) fn check_compatible(a: &ModelBundle, b: &ModelBundle) -> Result<()> {
    let (ca, cb) = (&a.config, &b.config);
    if ca.num_layers != cb.num_layers || ca.hidden_dim != cb.hidden_dim {
        return Err(Error::ModelMismatch(format!(
            "original has L = {}, d = {}; pruned has L = {}, d = {}",
            ca.num_layers, ca.hidden_dim, cb.num_layers, cb.hidden_dim
        )));
    }
    if ca.num_heads != cb.num_heads || ca.vocab_size != cb.vocab_size || ca.max_seq_len != cb.max_seq_len {
        return Err(Error::ModelMismatch("attention or embedding dimensions differ".into()));
    }
    Ok(())
}
