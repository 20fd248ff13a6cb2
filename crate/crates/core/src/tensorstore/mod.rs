//! Model container format, in-memory model types, token batches and the
//! synthetic fixture generator.
//!
//! Tensor naming inside a model container:
//!
//! | name                  | shape      | contents                                   |
//! |-----------------------|------------|--------------------------------------------|
//! | `embed.token`         | [V, d]     | token embedding table                      |
//! | `embed.position`      | [S, d]     | position embedding table                   |
//! | `embed.segment`       | [G, d]     | optional segment table                     |
//! | `embed.ln_gain/bias`  | [d]        | embedding layer norm                       |
//! | `layer.{i}.w1`        | [d, N]     | FFN input projection                       |
//! | `layer.{i}.b1`        | [N]        |                                            |
//! | `layer.{i}.w2`        | [N, d]     | FFN output projection                      |
//! | `layer.{i}.b2`        | [d]        |                                            |
//! | `layer.{i}.w{q,k,v,o}`| [d, d]     | attention projections                      |
//! | `layer.{i}.attn_bias` | [4, d]     | rows: q, k, v, o biases                    |
//! | `layer.{i}.ln`        | [4, d]     | rows: attn gain, attn bias, ffn gain, bias |

mod batch;
mod container;
mod model;
mod synth;

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

pub use batch::{read_token_batch, write_token_batch, Sequence, TokenBatch};
pub use container::{Container, Manifest, Tensor, TensorEntry, ALIGNMENT, BLOB_FILE, FORMAT_VERSION, MANIFEST_FILE};
pub use model::{Activation, Embeddings, LayerNormParams, LayerWeights, ModelBundle, ModelConfig};
pub use synth::{duplicate_groups, synth_model};

use crate::error::{Error, Result};

/// Number of tensors stored per encoder layer.
pub const TENSORS_PER_LAYER: usize = 10;

pub(crate) fn matrix_tensor(name: impl Into<String>, a: ArrayView2<'_, f32>) -> Tensor {
    Tensor::new(name, vec![a.nrows(), a.ncols()], a.iter().copied().collect())
}

pub(crate) fn vector_tensor(name: impl Into<String>, a: ArrayView1<'_, f32>) -> Tensor {
    Tensor::new(name, vec![a.len()], a.iter().copied().collect())
}

fn stack_rows(name: String, rows: &[&Array1<f32>]) -> Tensor {
    let d = rows.first().map_or(0, |r| r.len());
    let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Tensor::new(name, vec![rows.len(), d], data)
}

pub(crate) fn take<'a>(c: &'a Container, name: &str) -> Result<&'a Tensor> {
    c.get(name)
        .ok_or_else(|| Error::Manifest(format!("missing tensor `{name}`")))
}

pub(crate) fn as_matrix(t: &Tensor) -> Result<Array2<f32>> {
    if t.shape.len() != 2 {
        return Err(Error::shape(&t.name, format!("expected rank 2, found shape {:?}", t.shape)));
    }
    Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
        .map_err(|e| Error::shape(&t.name, e.to_string()))
}

pub(crate) fn as_vector(t: &Tensor) -> Result<Array1<f32>> {
    if t.shape.len() != 1 {
        return Err(Error::shape(&t.name, format!("expected rank 1, found shape {:?}", t.shape)));
    }
    Ok(Array1::from(t.data.clone()))
}

fn split_rows(t: &Tensor, rows: usize) -> Result<Vec<Array1<f32>>> {
    let m = as_matrix(t)?;
    if m.nrows() != rows {
        return Err(Error::shape(
            &t.name,
            format!("expected {rows} stacked rows, found {}", m.nrows()),
        ));
    }
    Ok(m.axis_iter(Axis(0)).map(|r| r.to_owned()).collect())
}

impl ModelBundle {
    pub fn to_container(&self) -> Result<Container> {
        self.validate()?;
        let e = &self.embeddings;
        let mut tensors = vec![
            matrix_tensor("embed.token", e.token.view()),
            matrix_tensor("embed.position", e.position.view()),
        ];
        if let Some(seg) = &e.segment {
            tensors.push(matrix_tensor("embed.segment", seg.view()));
        }
        tensors.push(vector_tensor("embed.ln_gain", e.ln.gain.view()));
        tensors.push(vector_tensor("embed.ln_bias", e.ln.bias.view()));

        for (i, l) in self.layers.iter().enumerate() {
            let n = |t: &str| format!("layer.{i}.{t}");
            tensors.extend([
                matrix_tensor(n("w1"), l.w1.view()),
                vector_tensor(n("b1"), l.b1.view()),
                matrix_tensor(n("w2"), l.w2.view()),
                vector_tensor(n("b2"), l.b2.view()),
                matrix_tensor(n("wq"), l.wq.view()),
                matrix_tensor(n("wk"), l.wk.view()),
                matrix_tensor(n("wv"), l.wv.view()),
                matrix_tensor(n("wo"), l.wo.view()),
                stack_rows(n("attn_bias"), &[&l.bq, &l.bk, &l.bv, &l.bo]),
                stack_rows(
                    n("ln"),
                    &[&l.ln_attn.gain, &l.ln_attn.bias, &l.ln_ffn.gain, &l.ln_ffn.bias],
                ),
            ]);
        }
        Ok(Container {
            config: Some(self.config.clone()),
            metadata: None,
            tensors,
        })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config = c
            .config
            .clone()
            .ok_or_else(|| Error::Manifest("model container has no config".into()))?;
        config.validate()?;

        let embeddings = Embeddings {
            token: as_matrix(take(c, "embed.token")?)?,
            position: as_matrix(take(c, "embed.position")?)?,
            segment: c.get("embed.segment").map(as_matrix).transpose()?,
            ln: LayerNormParams {
                gain: as_vector(take(c, "embed.ln_gain")?)?,
                bias: as_vector(take(c, "embed.ln_bias")?)?,
            },
        };

        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let n = |t: &str| format!("layer.{i}.{t}");
            let mut attn_bias = split_rows(take(c, &n("attn_bias"))?, 4)?.into_iter();
            let mut ln = split_rows(take(c, &n("ln"))?, 4)?.into_iter();
            let next = |it: &mut std::vec::IntoIter<Array1<f32>>| it.next().expect("4 rows");
            layers.push(LayerWeights {
                w1: as_matrix(take(c, &n("w1"))?)?,
                b1: as_vector(take(c, &n("b1"))?)?,
                w2: as_matrix(take(c, &n("w2"))?)?,
                b2: as_vector(take(c, &n("b2"))?)?,
                wq: as_matrix(take(c, &n("wq"))?)?,
                wk: as_matrix(take(c, &n("wk"))?)?,
                wv: as_matrix(take(c, &n("wv"))?)?,
                wo: as_matrix(take(c, &n("wo"))?)?,
                bq: next(&mut attn_bias),
                bk: next(&mut attn_bias),
                bv: next(&mut attn_bias),
                bo: next(&mut attn_bias),
                ln_attn: LayerNormParams {
                    gain: next(&mut ln),
                    bias: next(&mut ln),
                },
                ln_ffn: LayerNormParams {
                    gain: next(&mut ln),
                    bias: next(&mut ln),
                },
            });
        }
        let expected = 4 + usize::from(embeddings.segment.is_some()) + TENSORS_PER_LAYER * config.num_layers;
        if c.tensors.len() != expected {
            let known: Vec<String> = ModelBundle {
                config: config.clone(),
                embeddings: embeddings.clone(),
                layers: layers.clone(),
            }
            .tensor_names();
            let extra: Vec<&str> = c
                .tensors
                .iter()
                .map(|t| t.name.as_str())
                .filter(|n| !known.iter().any(|k| k == n))
                .collect();
            return Err(Error::Manifest(format!("unexpected tensors in model container: {extra:?}")));
        }
        let bundle = Self {
            config,
            embeddings,
            layers,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["embed.token".to_string(), "embed.position".into()];
        if self.embeddings.segment.is_some() {
            names.push("embed.segment".into());
        }
        names.push("embed.ln_gain".into());
        names.push("embed.ln_bias".into());
        for i in 0..self.config.num_layers {
            for t in ["w1", "b1", "w2", "b2", "wq", "wk", "wv", "wo", "attn_bias", "ln"] {
                names.push(format!("layer.{i}.{t}"));
            }
        }
        names
    }

    /// SHA-256 of the encoded container.
    pub fn content_hash(&self) -> Result<String> {
        self.to_container()?.content_hash()
    }
}

/// Validates `bundle` and writes it as a container directory.
pub fn write_container(bundle: &ModelBundle, dir: &Path) -> Result<()> {
    bundle.to_container()?.write(dir)
}

/// Reads and validates a model container directory.
pub fn read_container(dir: &Path) -> Result<ModelBundle> {
    ModelBundle::from_container(&Container::read(dir)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelBundle {
        synth_model(11, &ModelConfig::new(2, 8, 16, 2, 20, 6), 0.25).unwrap()
    }

    #[test]
    fn tensor_count_matches_layer_schema() {
        let b = toy();
        let c = b.to_container().unwrap();
        // 2 layers × 10 tensors + token, position, ln gain, ln bias
        assert_eq!(c.tensors.len(), 2 * TENSORS_PER_LAYER + 4);
        assert_eq!(c.get("layer.1.w1").unwrap().shape, vec![8, 16]);
        assert_eq!(c.get("layer.0.attn_bias").unwrap().shape, vec![4, 8]);
    }

    #[test]
    fn container_round_trip_in_memory() {
        let b = toy();
        let back = ModelBundle::from_container(&b.to_container().unwrap()).unwrap();
        assert_eq!(b, back);
    }

    #[test]
    fn wrong_layer_count_is_validation_error() {
        let mut b = toy();
        b.layers.pop();
        assert!(matches!(b.to_container(), Err(Error::Validation(_))));
    }

    #[test]
    fn shape_violation_names_tensor() {
        let mut b = toy();
        b.layers[1].b1 = Array1::zeros(15);
        match b.validate() {
            Err(Error::ShapeMismatch { tensor, .. }) => assert_eq!(tensor, "layer.1.b1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nan_weight_names_tensor() {
        let mut b = toy();
        b.layers[0].w2[[3, 1]] = f32::NAN;
        match b.validate() {
            Err(Error::NonFinite { tensor }) => assert_eq!(tensor, "layer.0.w2"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_tensor_is_manifest_error() {
        let mut c = toy().to_container().unwrap();
        c.tensors.retain(|t| t.name != "layer.0.wk");
        assert!(matches!(ModelBundle::from_container(&c), Err(Error::Manifest(_))));
    }

    #[test]
    fn extra_tensor_is_manifest_error() {
        let mut c = toy().to_container().unwrap();
        c.tensors.push(Tensor::new("layer.0.bogus", vec![1], vec![0.0]));
        assert!(matches!(ModelBundle::from_container(&c), Err(Error::Manifest(_))));
    }

    #[test]
    fn segment_table_round_trips() {
        let mut b = toy();
        b.embeddings.segment = Some(Array2::from_elem((2, 8), 0.25));
        let back = ModelBundle::from_container(&b.to_container().unwrap()).unwrap();
        assert_eq!(back.embeddings.segment, b.embeddings.segment);
    }
}
