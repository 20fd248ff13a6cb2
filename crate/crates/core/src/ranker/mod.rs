//! Filter scoring strategies, the R2·D2 merge and global top-k selection.

mod flops;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

pub use flops::{budget_to_k, flops_of, FlopsModel};

use crate::encoder::{ActivationCapture, FilterMask};
use crate::error::{Error, Result};
use crate::kcha::{r2_scores, KernelParams};
use crate::tensorstore::{as_matrix, matrix_tensor, take, Container, ModelBundle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    R2d2,
    R2Only,
    D2Only,
    WeightMagnitude,
    OutputMagnitude,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::R2d2,
        Strategy::R2Only,
        Strategy::D2Only,
        Strategy::WeightMagnitude,
        Strategy::OutputMagnitude,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::R2d2 => "r2d2",
            Strategy::R2Only => "r2_only",
            Strategy::D2Only => "d2_only",
            Strategy::WeightMagnitude => "weight_magnitude",
            Strategy::OutputMagnitude => "output_magnitude",
        }
    }

    pub fn needs_capture(self) -> bool {
        matches!(self, Strategy::R2d2 | Strategy::D2Only | Strategy::OutputMagnitude)
    }

    pub fn uses_kernel(self) -> bool {
        matches!(self, Strategy::R2d2 | Strategy::R2Only)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerConvergence {
    pub iterations: usize,
    pub converged: bool,
    pub final_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreMeta {
    /// Captured token count, for data-dependent strategies.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelParams>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub convergence: Vec<LayerConvergence>,
}

/// L × N per-filter importance scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub scores: Array2<f64>,
    pub strategy: Strategy,
    pub meta: ScoreMeta,
}

impl ScoreTable {
    pub fn num_layers(&self) -> usize {
        self.scores.nrows()
    }

    pub fn num_filters(&self) -> usize {
        self.scores.ncols()
    }

    /// Container with one `scores.{strategy}` tensor (stored as f32) and the
    /// metadata in the manifest.
    pub fn to_container(&self) -> Result<Container> {
        let meta = serde_json::json!({
            "strategy": self.strategy.as_str(),
            "meta": self.meta,
        });
        Ok(Container {
            config: None,
            metadata: Some(meta),
            tensors: vec![matrix_tensor(
                format!("scores.{}", self.strategy),
                self.scores.mapv(|v| v as f32).view(),
            )],
        })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = c
            .metadata
            .as_ref()
            .ok_or_else(|| Error::Manifest("score container has no metadata".into()))?;
        let strategy: Strategy = meta["strategy"]
            .as_str()
            .ok_or_else(|| Error::Manifest("score metadata lacks a strategy".into()))?
            .parse()?;
        let score_meta: ScoreMeta =
            serde_json::from_value(meta["meta"].clone()).map_err(|e| Error::Manifest(e.to_string()))?;
        let scores = as_matrix(take(c, &format!("scores.{strategy}"))?)?.mapv(f64::from);
        Ok(Self {
            scores,
            strategy,
            meta: score_meta,
        })
    }
}

fn check_capture(capture: &ActivationCapture) -> Result<()> {
    if capture.tokens == 0 {
        return Err(Error::Validation("activation capture holds no tokens".into()));
    }
    capture.validate()
}

/// Mean absolute activation per filter, L × N.
pub fn d2_raw(capture: &ActivationCapture) -> Result<Array2<f64>> {
    check_capture(capture)?;
    let n = capture.hidden.first().map_or(0, |h| h.ncols());
    if capture.hidden.iter().any(|h| h.ncols() != n) {
        return Err(Error::Validation("capture layers have unequal widths".into()));
    }
    let t = capture.tokens as f64;
    let mut raw = Array2::zeros((capture.num_layers(), n));
    for (mut row, h) in raw.axis_iter_mut(Axis(0)).zip(&capture.hidden) {
        for (i, col) in h.axis_iter(Axis(1)).enumerate() {
            row[i] = col.iter().map(|v| f64::from(*v).abs()).sum::<f64>() / t;
        }
    }
    Ok(raw)
}

/// Divides every row by its maximum; all-zero rows stay zero.
pub fn normalize_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            row.mapv_inplace(|v| v / max);
        } else {
            row.fill(0.0);
        }
    }
    out
}

/// Data-driven scores: per-layer max-normalized mean |activation|, in [0, 1].
pub fn d2_scores(capture: &ActivationCapture) -> Result<ScoreTable> {
    Ok(ScoreTable {
        scores: normalize_rows(&d2_raw(capture)?),
        strategy: Strategy::D2Only,
        meta: ScoreMeta {
            tokens: Some(capture.tokens),
            ..Default::default()
        },
    })
}

/// Representative scores from the kernelized convex hull approximation.
pub fn r2_table(bundle: &ModelBundle, params: &KernelParams) -> Result<ScoreTable> {
    let (scores, results) = r2_scores(bundle, params)?;
    Ok(ScoreTable {
        scores,
        strategy: Strategy::R2Only,
        meta: ScoreMeta {
            tokens: None,
            kernel: Some(*params),
            convergence: results
                .into_iter()
                .map(|r| LayerConvergence {
                    iterations: r.iterations,
                    converged: r.converged,
                    final_delta: r.final_delta,
                })
                .collect(),
        },
    })
}

/// Elementwise product of R2 scores with normalized D2 scores. R2 enters raw
/// unless `normalize_r2` is set, in which case each R2 row is first divided by
/// its maximum.
pub fn merge_r2d2(r2: &ScoreTable, d2: &ScoreTable, normalize_r2: bool) -> Result<ScoreTable> {
    if r2.scores.dim() != d2.scores.dim() {
        return Err(Error::shape(
            "scores",
            format!("R2 is {:?} but D2 is {:?}", r2.scores.dim(), d2.scores.dim()),
        ));
    }
    let r2_scores = if normalize_r2 {
        normalize_rows(&r2.scores)
    } else {
        r2.scores.clone()
    };
    Ok(ScoreTable {
        scores: &r2_scores * &normalize_rows(&d2.scores),
        strategy: Strategy::R2d2,
        meta: ScoreMeta {
            tokens: d2.meta.tokens,
            kernel: r2.meta.kernel,
            convergence: r2.meta.convergence.clone(),
        },
    })
}

/// L1 norm of each filter's `W1` column concatenated with its `W2` row.
pub fn weight_magnitude(bundle: &ModelBundle) -> Result<Array2<f64>> {
    let widths = bundle.layer_widths();
    let n = widths.first().copied().unwrap_or(0);
    if widths.iter().any(|&w| w != n) {
        return Err(Error::Validation(format!("unequal layer widths {widths:?}")));
    }
    let mut out = Array2::zeros((bundle.layers.len(), n));
    for (mut row, layer) in out.rows_mut().into_iter().zip(&bundle.layers) {
        for i in 0..n {
            let l1: f64 = layer
                .w1
                .column(i)
                .iter()
                .chain(layer.w2.row(i).iter())
                .map(|v| f64::from(*v).abs())
                .sum();
            row[i] = l1;
        }
    }
    Ok(out)
}

/// Options that only affect some strategies.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScoreOptions {
    pub kernel: KernelParams,
    pub normalize_r2: bool,
}

/// Scores for any strategy. Data-dependent strategies need `capture`.
pub fn compute_scores(
    strategy: Strategy,
    bundle: &ModelBundle,
    capture: Option<&ActivationCapture>,
    opts: &ScoreOptions,
) -> Result<ScoreTable> {
    let need = || capture.ok_or_else(|| Error::MissingCapture(strategy.to_string()));
    let table = match strategy {
        Strategy::R2Only => r2_table(bundle, &opts.kernel)?,
        Strategy::D2Only => d2_scores(need()?)?,
        Strategy::R2d2 => {
            let d2 = d2_scores(need()?)?;
            let r2 = r2_table(bundle, &opts.kernel)?;
            merge_r2d2(&r2, &d2, opts.normalize_r2)?
        }
        Strategy::WeightMagnitude => ScoreTable {
            scores: weight_magnitude(bundle)?,
            strategy,
            meta: ScoreMeta::default(),
        },
        Strategy::OutputMagnitude => {
            let cap = need()?;
            ScoreTable {
                scores: d2_raw(cap)?,
                strategy,
                meta: ScoreMeta {
                    tokens: Some(cap.tokens),
                    ..Default::default()
                },
            }
        }
    };
    if table.scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            tensor: format!("scores.{strategy}"),
        });
    }
    Ok(table)
}

/// Keeps the `k` highest-scoring filters across all layers. Ties are broken
/// toward the lower layer index, then the lower filter index. Scales start
/// at 1.
pub fn select_topk(scores: &Array2<f64>, k: usize) -> Result<FilterMask> {
    let (layers, filters) = scores.dim();
    if k > layers * filters {
        return Err(Error::Validation(format!(
            "k = {k} exceeds the {} available filters",
            layers * filters
        )));
    }
    let mut order: Vec<(usize, usize)> = (0..layers).flat_map(|l| (0..filters).map(move |i| (l, i))).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut mask = FilterMask::zeros(layers, filters);
    for &idx in &order[..k] {
        mask.mask[idx] = true;
    }
    Ok(mask)
}
