//! Dense helpers shared by the encoder, ranker and rescale solver.
//!
//! Products take 32-bit operands and accumulate in 64-bit.

use ndarray::{Array2, ArrayView1, ArrayView2, Zip};

pub fn to_f64(a: ArrayView2<'_, f32>) -> Array2<f64> {
    a.mapv(f64::from)
}

/// `a · b` with f64 accumulation, returned in f64.
pub fn matmul_f64(a: ArrayView2<'_, f32>, b: ArrayView2<'_, f32>) -> Array2<f64> {
    assert_eq!(a.ncols(), b.nrows(), "matmul inner dimension");
    if a.ncols() == 0 {
        return Array2::zeros((a.nrows(), b.ncols()));
    }
    to_f64(a).dot(&to_f64(b))
}

/// `a · b` with f64 accumulation, rounded to f32.
pub fn matmul(a: ArrayView2<'_, f32>, b: ArrayView2<'_, f32>) -> Array2<f32> {
    matmul_f64(a, b).mapv(|v| v as f32)
}

/// `x · w + bias` (bias broadcast over rows), f64 accumulation.
pub fn affine(x: ArrayView2<'_, f32>, w: ArrayView2<'_, f32>, bias: ArrayView1<'_, f32>) -> Array2<f32> {
    let mut out = matmul_f64(x, w);
    for mut row in out.rows_mut() {
        Zip::from(&mut row).and(&bias).for_each(|o, &b| *o += f64::from(b));
    }
    out.mapv(|v| v as f32)
}

pub fn frobenius(a: ArrayView2<'_, f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn max_abs_diff(a: ArrayView2<'_, f32>, b: ArrayView2<'_, f32>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).abs())
        .fold(0.0, f64::max)
}
