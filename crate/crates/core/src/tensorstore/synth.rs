//! Deterministic synthetic encoders for tests and demos.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};

use super::model::{Embeddings, LayerNormParams, LayerWeights, ModelBundle, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

fn uniform_matrix(rng: &mut SplitMix64, rows: usize, cols: usize, bound: f64) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |_| rng.uniform(-bound, bound) as f32)
}

fn uniform_vector(rng: &mut SplitMix64, len: usize, bound: f64) -> Array1<f32> {
    Array1::from_shape_fn(len, |_| rng.uniform(-bound, bound) as f32)
}

fn layer_norm(rng: &mut SplitMix64, d: usize) -> LayerNormParams {
    LayerNormParams {
        gain: Array1::from_shape_fn(d, |_| (1.0 + rng.uniform(-0.1, 0.1)) as f32),
        bias: uniform_vector(rng, d, 0.1),
    }
}

/// Builds a pseudo-random encoder that is a pure function of its arguments.
///
/// Weights are uniform with fan-in scaling (`±sqrt(3 / fan_in)`), except
/// `W2`, whose rows get unit expected squared norm (`±sqrt(3 / d)`) so that
/// filter outputs are spread out at unit kernel width. In every
/// layer `round(redundancy · N)` filters (capped at `N - 1`) are exact copies
/// of the remaining originals: same `w1` column, `b1` entry and `w2` row.
/// Copies are assigned round-robin to the originals and all filters are then
/// shuffled within the layer.
pub fn synth_model(seed: u64, config: &ModelConfig, redundancy: f64) -> Result<ModelBundle> {
    config.validate()?;
    if config.per_layer_filters.is_some() {
        return Err(Error::Validation("synth_model builds dense models only".into()));
    }
    if !(0.0..=1.0).contains(&redundancy) {
        return Err(Error::Validation(format!("redundancy {redundancy} outside [0, 1]")));
    }
    let mut rng = SplitMix64::new(seed);
    let d = config.hidden_dim;
    let n = config.num_filters;
    let proj = (3.0 / d as f64).sqrt();
    let out_proj = (3.0 / d as f64).sqrt();

    let embeddings = Embeddings {
        token: uniform_matrix(&mut rng, config.vocab_size, d, 1.0),
        position: uniform_matrix(&mut rng, config.max_seq_len, d, 1.0),
        segment: None,
        ln: layer_norm(&mut rng, d),
    };

    let n_dup = ((redundancy * n as f64).round() as usize).min(n - 1);
    let n_orig = n - n_dup;

    let mut layers = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        let wq = uniform_matrix(&mut rng, d, d, proj);
        let bq = uniform_vector(&mut rng, d, 0.1);
        let wk = uniform_matrix(&mut rng, d, d, proj);
        let bk = uniform_vector(&mut rng, d, 0.1);
        let wv = uniform_matrix(&mut rng, d, d, proj);
        let bv = uniform_vector(&mut rng, d, 0.1);
        let wo = uniform_matrix(&mut rng, d, d, proj);
        let bo = uniform_vector(&mut rng, d, 0.1);
        let ln_attn = layer_norm(&mut rng, d);

        let w1_orig = uniform_matrix(&mut rng, d, n_orig, proj);
        let b1_orig = uniform_vector(&mut rng, n_orig, 0.5);
        let w2_orig = uniform_matrix(&mut rng, n_orig, d, out_proj);
        let b2 = uniform_vector(&mut rng, d, 0.1);
        let ln_ffn = layer_norm(&mut rng, d);

        // slot -> source original filter
        let mut source: Vec<usize> = (0..n).map(|slot| slot % n_orig).collect();
        rng.shuffle(&mut source);

        let mut w1 = Array2::zeros((d, n));
        let mut b1 = Array1::zeros(n);
        let mut w2 = Array2::zeros((n, d));
        for (slot, &src) in source.iter().enumerate() {
            w1.column_mut(slot).assign(&w1_orig.column(src));
            b1[slot] = b1_orig[src];
            w2.row_mut(slot).assign(&w2_orig.row(src));
        }

        layers.push(LayerWeights {
            w1,
            b1,
            w2,
            b2,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln_attn,
            ln_ffn,
        });
    }

    let bundle = ModelBundle {
        config: config.clone(),
        embeddings,
        layers,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Groups of filters (size ≥ 2) in `layer` whose `w1` column, `b1` entry and
/// `w2` row are bitwise identical. Groups and their members are sorted.
pub fn duplicate_groups(layer: &LayerWeights) -> Vec<Vec<usize>> {
    let mut by_key: BTreeMap<Vec<u32>, Vec<usize>> = BTreeMap::new();
    for i in 0..layer.num_filters() {
        let key: Vec<u32> = layer
            .w1
            .column(i)
            .iter()
            .chain(std::iter::once(&layer.b1[i]))
            .chain(layer.w2.row(i).iter())
            .map(|v| v.to_bits())
            .collect();
        by_key.entry(key).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = by_key.into_values().filter(|g| g.len() > 1).collect();
    groups.sort();
    groups
}
