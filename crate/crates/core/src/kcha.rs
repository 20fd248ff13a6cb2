//! Representative ranking by kernelized convex hull approximation.
//!
//! The rows of a layer's output projection `W2` (N × d) are treated as N
//! points. A nonnegative self-representation matrix `C` (N × N) is fitted with
//! Semi-NMF multiplicative updates in a Gaussian kernel space; points that can
//! only be represented by themselves (extreme points) keep a large diagonal
//! entry. The diagonal is the filter's score.

use ndarray::{Array1, Array2, ArrayView2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorstore::ModelBundle;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Gaussian kernel width.
    pub width: f64,
    /// Stop once the relative change of `C` falls to this value.
    pub alpha: f64,
    pub max_iters: usize,
    /// Denominator floor for the multiplicative update.
    pub floor: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            width: 1.0,
            alpha: 0.01,
            max_iters: 200,
            floor: 1e-12,
        }
    }
}

impl KernelParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.width > 0.0
            && self.width.is_finite()
            && self.alpha > 0.0
            && self.alpha.is_finite()
            && self.max_iters >= 1
            && self.floor > 0.0
            && self.floor.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid kernel parameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KchaResult {
    /// Diagonal of `C` at the final iterate.
    pub scores: Vec<f64>,
    pub iterations: usize,
    pub final_delta: f64,
    pub converged: bool,
}

/// `K[i,j] = exp(-‖p_i − p_j‖² / (2 width²))` over the rows of `points`.
///
/// Distances are accumulated directly (not through the Gram expansion), so the
/// diagonal is exactly 1 and identical rows give identical kernel rows.
pub fn gaussian_kernel(points: ArrayView2<'_, f64>, width: f64) -> Result<Array2<f64>> {
    if !(width > 0.0 && width.is_finite()) {
        return Err(Error::Validation(format!("kernel width {width} must be positive")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            tensor: "kernel.points".into(),
        });
    }
    let n = points.nrows();
    let denom = 2.0 * width * width;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let pi = points.row(i);
            (0..n)
                .map(|j| {
                    if i == j {
                        return 1.0;
                    }
                    // evaluate each pair in (min, max) order so K is exactly symmetric
                    let (a, b) = if i < j { (pi, points.row(j)) } else { (points.row(j), pi) };
                    let d2: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
                    (-d2 / denom).exp()
                })
                .collect()
        })
        .collect();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((n, n), flat).expect("n × n"))
}

fn check_square(name: &str, a: &Array2<f64>, c: &Array2<f64>) -> Result<()> {
    if !a.is_square() || a.dim() != c.dim() {
        return Err(Error::shape(
            name,
            format!("expected matching square matrices, found {:?} and {:?}", a.dim(), c.dim()),
        ));
    }
    Ok(())
}

/// One general Semi-NMF multiplicative step:
/// `C' = C ∘ sqrt(([A]₊ + [A]₋·C) / ([A]₋ + [A]₊·C))` with
/// `[A]₊ = (|A| + A)/2` and `[A]₋ = (|A| − A)/2`, both nonnegative. The
/// denominator is floored at `floor`.
pub fn seminmf_update(a: &Array2<f64>, c: &Array2<f64>, floor: f64) -> Result<Array2<f64>> {
    check_square("seminmf.a", a, c)?;
    let pos = a.mapv(|v| (v.abs() + v) / 2.0);
    let neg = a.mapv(|v| (v.abs() - v) / 2.0);
    let num = &pos + &neg.dot(c);
    let den = &neg + &pos.dot(c);
    let mut out = c.clone();
    Zip::from(&mut out)
        .and(&num)
        .and(&den)
        .for_each(|o, &n, &d| *o *= (n / d.max(floor)).sqrt());
    Ok(out)
}

/// The positive-kernel specialization: `C' = C ∘ sqrt(K / (K·C))`.
pub fn kernel_update(k: &Array2<f64>, c: &Array2<f64>, floor: f64) -> Result<Array2<f64>> {
    check_square("kcha.kernel", k, c)?;
    let kc = k.dot(c);
    let mut out = c.clone();
    Zip::from(&mut out)
        .and(k)
        .and(&kc)
        .for_each(|o, &kv, &d| *o *= (kv / d.max(floor)).sqrt());
    Ok(out)
}

/// Iterates [`kernel_update`] from `C₀ = 1/N` until
/// `Σ|C_{i+1} − C_i| / ΣC_i ≤ alpha` or `max_iters` is reached. Hitting the
/// cap is not an error; the result is flagged `converged = false`.
pub fn kcha_iterate(k: &Array2<f64>, params: &KernelParams) -> Result<KchaResult> {
    params.validate()?;
    if !k.is_square() {
        return Err(Error::shape("kcha.kernel", format!("kernel is {:?}", k.dim())));
    }
    if k.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Validation("kernel entries must be finite and positive".into()));
    }
    let n = k.nrows();
    if n == 0 {
        return Ok(KchaResult {
            scores: Vec::new(),
            iterations: 0,
            final_delta: 0.0,
            converged: true,
        });
    }
    let mut c = Array2::from_elem((n, n), 1.0 / n as f64);
    let mut delta = f64::INFINITY;
    let mut iterations = 0;
    while iterations < params.max_iters {
        let next = kernel_update(k, &c, params.floor)?;
        let change: f64 = Zip::from(&next)
            .and(&c)
            .fold(0.0, |acc, &a, &b| acc + (a - b).abs());
        delta = change / c.sum();
        c = next;
        iterations += 1;
        if delta <= params.alpha {
            break;
        }
    }
    Ok(KchaResult {
        scores: c.diag().to_vec(),
        iterations,
        final_delta: delta,
        converged: delta <= params.alpha,
    })
}

/// Scores for one layer's `W2` rows.
pub fn layer_scores(w2: ArrayView2<'_, f32>, params: &KernelParams) -> Result<KchaResult> {
    let k = gaussian_kernel(w2.mapv(f64::from).view(), params.width)?;
    kcha_iterate(&k, params)
}

/// Per-layer representative scores (L × N) and iteration diagnostics.
/// Layers are processed independently and in parallel.
pub fn r2_scores(bundle: &ModelBundle, params: &KernelParams) -> Result<(Array2<f64>, Vec<KchaResult>)> {
    params.validate()?;
    let widths = bundle.layer_widths();
    let n = widths.first().copied().unwrap_or(0);
    if widths.iter().any(|&w| w != n) {
        return Err(Error::Validation(format!(
            "representative ranking needs equal layer widths, found {widths:?}"
        )));
    }
    let results = bundle
        .layers
        .par_iter()
        .map(|layer| layer_scores(layer.w2.view(), params))
        .collect::<Result<Vec<_>>>()?;
    let mut table = Array2::zeros((results.len(), n));
    for (mut row, r) in table.rows_mut().into_iter().zip(&results) {
        row.assign(&Array1::from(r.scores.clone()));
    }
    Ok((table, results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn kernel_diag_and_known_value() {
        let p = array![[0.0], [2f64.sqrt()]];
        let k = gaussian_kernel(p.view(), 1.0).unwrap();
        assert_eq!(k[[0, 0]], 1.0);
        assert_eq!(k[[1, 1]], 1.0);
        assert!((k[[0, 1]] - (-1f64).exp()).abs() < 1e-15);
        assert_eq!(k[[0, 1]], k[[1, 0]]);
    }

    #[test]
    fn kernel_rejects_bad_input() {
        let p = array![[0.0, f64::NAN]];
        assert!(gaussian_kernel(p.view(), 1.0).is_err());
        let p = array![[0.0, 1.0]];
        assert!(gaussian_kernel(p.view(), 0.0).is_err());
    }

    #[test]
    fn identity_is_fixed_point() {
        let p = array![[0.0, 0.0], [1.0, 0.5], [0.3, -0.7]];
        let k = gaussian_kernel(p.view(), 1.0).unwrap();
        let eye = Array2::eye(3);
        let next = kernel_update(&k, &eye, 1e-12).unwrap();
        for (a, b) in next.iter().zip(eye.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn two_points_stay_symmetric() {
        let p = array![[0.0, 0.0], [0.8, 0.1]];
        let k = gaussian_kernel(p.view(), 1.0).unwrap();
        let mut c = Array2::from_elem((2, 2), 0.5);
        for _ in 0..30 {
            c = kernel_update(&k, &c, 1e-12).unwrap();
            assert_eq!(c[[0, 0]], c[[1, 1]]);
        }
    }

    #[test]
    fn collinear_endpoints_outrank_midpoint() {
        let p = array![[0.0], [0.5], [1.0]];
        let k = gaussian_kernel(p.view(), 1.0).unwrap();
        let r = kcha_iterate(&k, &KernelParams::default()).unwrap();
        assert!(r.converged);
        assert!(r.scores[0] > r.scores[1]);
        assert!(r.scores[2] > r.scores[1]);
    }

    #[test]
    fn cap_reports_non_convergence() {
        let p = array![[0.0], [0.5], [1.0], [1.7]];
        let k = gaussian_kernel(p.view(), 1.0).unwrap();
        let params = KernelParams {
            alpha: 1e-300,
            max_iters: 3,
            ..Default::default()
        };
        let r = kcha_iterate(&k, &params).unwrap();
        assert_eq!(r.iterations, 3);
        assert!(!r.converged);
        assert_eq!(r.scores.len(), 4);
    }

    #[test]
    fn single_point_converges_immediately() {
        let k = array![[1.0]];
        let r = kcha_iterate(&k, &KernelParams::default()).unwrap();
        assert_eq!(r.scores, vec![1.0]);
        assert_eq!(r.iterations, 1);
        assert!(r.converged);
    }

    #[test]
    fn invalid_params() {
        let bad = KernelParams {
            width: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = KernelParams {
            max_iters: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn seminmf_shape_mismatch() {
        let a = Array2::<f64>::ones((3, 3));
        let c = Array2::<f64>::ones((2, 2));
        assert!(matches!(seminmf_update(&a, &c, 1e-12), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn seminmf_handles_mixed_signs() {
        let a = array![[1.0, -0.5], [-0.5, 2.0]];
        let c = Array2::from_elem((2, 2), 0.5);
        let next = seminmf_update(&a, &c, 1e-12).unwrap();
        assert!(next.iter().all(|v| *v > 0.0 && v.is_finite()));
    }
}
