//! Versioned JSON envelope shared by every model kind.

use serde::{Deserialize, Serialize};

use super::{field_pairs, DeepFmModel, Layout};
use crate::baseline::LinearModel;
use crate::features::FeatureSchema;
use crate::{Error, Result};

pub const MODEL_FORMAT: &str = "rankdfm-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerData {
    inputs: usize,
    outputs: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeepFmData {
    num_fields: usize,
    rows_per_field: usize,
    embedding_dim: usize,
    hidden: Vec<usize>,
    beta: f64,
    gates_hardened: bool,
    pair_mask: Vec<bool>,
    field_mask: Vec<bool>,
    embeddings: Vec<f64>,
    linear: Vec<f64>,
    bias: f64,
    fm_gates: Vec<f64>,
    deep_gates: Vec<f64>,
    layers: Vec<LayerData>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearData {
    num_fields: usize,
    rows_per_field: usize,
    weights: Vec<f64>,
    bias: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Body {
    Deepfm(DeepFmData),
    Linear(LinearData),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    format: String,
    version: u32,
    schema_hash: String,
    model: Body,
}

/// Any model that can be written to or read from a model file.
#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum ModelArtifact {
    DeepFm(DeepFmModel),
    Linear(LinearModel),
}

impl ModelArtifact {
    pub fn schema_hash(&self) -> &str {
        match self {
            ModelArtifact::DeepFm(m) => m.schema_hash(),
            ModelArtifact::Linear(m) => m.schema_hash(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ModelArtifact::DeepFm(_) => "deepfm",
            ModelArtifact::Linear(_) => "linear",
        }
    }

    pub fn to_json(&self) -> String {
        let model = match self {
            ModelArtifact::DeepFm(m) => Body::Deepfm(deepfm_data(m)),
            ModelArtifact::Linear(m) => Body::Linear(LinearData {
                num_fields: m.num_fields(),
                rows_per_field: m.rows_per_field(),
                weights: m.weights().to_vec(),
                bias: m.bias(),
            }),
        };
        let env = Envelope {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            schema_hash: self.schema_hash().to_string(),
            model,
        };
        serde_json::to_string(&env).expect("model serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let env: Envelope = serde_json::from_str(text).map_err(|e| Error::format("model", e))?;
        if env.format != MODEL_FORMAT {
            return Err(Error::format("model", format!("unexpected format `{}`", env.format)));
        }
        if env.version != MODEL_VERSION {
            return Err(Error::format("model", format!("unsupported version {}", env.version)));
        }
        match env.model {
            Body::Deepfm(d) => deepfm_from_data(env.schema_hash, d).map(ModelArtifact::DeepFm),
            Body::Linear(d) => {
                if d.num_fields == 0 || d.rows_per_field == 0 || d.weights.len() != d.num_fields * d.rows_per_field {
                    return Err(Error::format("model", "linear weight table has the wrong size"));
                }
                if d.weights.iter().any(|w| !w.is_finite()) || !d.bias.is_finite() {
                    return Err(Error::format("model", "non-finite parameter"));
                }
                Ok(ModelArtifact::Linear(LinearModel::from_parts(
                    env.schema_hash,
                    d.num_fields,
                    d.rows_per_field,
                    d.weights,
                    d.bias,
                )))
            }
        }
    }

    /// Loads and checks that the model was trained against `schema`.
    pub fn from_json_for_schema(text: &str, schema: &FeatureSchema) -> Result<Self> {
        let artifact = Self::from_json(text)?;
        let expected = schema.hash();
        if artifact.schema_hash() != expected {
            return Err(Error::ModelMismatch(format!(
                "model schema hash {} does not match {}",
                artifact.schema_hash(),
                expected
            )));
        }
        Ok(artifact)
    }
}

fn deepfm_data(m: &DeepFmModel) -> DeepFmData {
    let lay = &m.layout;
    let p = &m.params;
    DeepFmData {
        num_fields: m.num_fields,
        rows_per_field: m.rows_per_field,
        embedding_dim: m.k,
        hidden: m.hidden.clone(),
        beta: m.beta,
        gates_hardened: m.gates_hardened,
        pair_mask: m.pair_mask.clone(),
        field_mask: m.field_mask.clone(),
        embeddings: p[lay.embeddings.clone()].to_vec(),
        linear: p[lay.linear.clone()].to_vec(),
        bias: p[lay.bias],
        fm_gates: p[lay.fm_gates.clone()].to_vec(),
        deep_gates: p[lay.deep_gates.clone()].to_vec(),
        layers: lay
            .layers
            .iter()
            .map(|l| LayerData {
                inputs: l.inputs,
                outputs: l.outputs,
                weights: p[l.weights.clone()].to_vec(),
                bias: p[l.bias.clone()].to_vec(),
            })
            .collect(),
    }
}

fn deepfm_from_data(schema_hash: String, d: DeepFmData) -> Result<DeepFmModel> {
    let bad = |reason: &str| Err(Error::format("model", reason.to_string()));
    let (f, rows, k) = (d.num_fields, d.rows_per_field, d.embedding_dim);
    if f == 0 || k == 0 || rows < 3 || rows > u16::MAX as usize || f > 4096 || k > 4096 {
        return bad("invalid dimensions");
    }
    if !(d.beta > 0.0 && d.beta.is_finite()) {
        return bad("beta must be finite and positive");
    }
    if d.pair_mask.len() != f * (f - 1) / 2 || d.field_mask.len() != f {
        return bad("mask lengths do not match the field count");
    }
    if !d.gates_hardened && (d.pair_mask.iter().any(|&m| !m) || d.field_mask.iter().any(|&m| !m)) {
        return bad("masked interactions require hardened gates");
    }
    let deep_fields: Vec<usize> = (0..f).filter(|&i| d.field_mask[i]).collect();
    if deep_fields.is_empty() {
        return bad("no field feeds the deep side");
    }
    if d.layers.len() != d.hidden.len() + 1 || d.hidden.iter().any(|&h| h == 0 || h > 1 << 16) {
        return bad("layer list does not match hidden widths");
    }
    let layout = Layout::new(f, rows, k, deep_fields.len() * k, &d.hidden);
    for (data, l) in d.layers.iter().zip(&layout.layers) {
        if data.inputs != l.inputs || data.outputs != l.outputs {
            return bad("layer shape does not match the masks and hidden widths");
        }
        if data.weights.len() != l.inputs * l.outputs || data.bias.len() != l.outputs {
            return bad("layer tables have the wrong size");
        }
    }
    if d.embeddings.len() != layout.embeddings.len()
        || d.linear.len() != layout.linear.len()
        || d.fm_gates.len() != layout.fm_gates.len()
        || d.deep_gates.len() != layout.deep_gates.len()
    {
        return bad("parameter tables have the wrong size");
    }
    let mut params = vec![0.0; layout.total];
    params[layout.embeddings.clone()].copy_from_slice(&d.embeddings);
    params[layout.linear.clone()].copy_from_slice(&d.linear);
    params[layout.bias] = d.bias;
    params[layout.fm_gates.clone()].copy_from_slice(&d.fm_gates);
    params[layout.deep_gates.clone()].copy_from_slice(&d.deep_gates);
    for (data, l) in d.layers.iter().zip(&layout.layers) {
        params[l.weights.clone()].copy_from_slice(&data.weights);
        params[l.bias.clone()].copy_from_slice(&data.bias);
    }
    if params.iter().any(|p| !p.is_finite()) {
        return bad("non-finite parameter");
    }
    Ok(DeepFmModel {
        schema_hash,
        num_fields: f,
        rows_per_field: rows,
        k,
        hidden: d.hidden,
        beta: d.beta,
        pairs: field_pairs(f),
        pair_mask: d.pair_mask,
        field_mask: d.field_mask,
        deep_fields,
        gates_hardened: d.gates_hardened,
        layout,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::toy_schema;
    use crate::model::{init_model, ModelConfig};

    #[test]
    fn round_trip_soft_and_pruned() {
        let schema = toy_schema(4, 0.1);
        let m = init_model(&schema, &ModelConfig::default()).unwrap();
        let text = ModelArtifact::DeepFm(m.clone()).to_json();
        assert_eq!(ModelArtifact::from_json(&text).unwrap(), ModelArtifact::DeepFm(m.clone()));

        let pruned = m
            .restructured(&[true, false, true, true, false, true], &[true, true, false, true])
            .unwrap();
        let text = ModelArtifact::DeepFm(pruned.clone()).to_json();
        match ModelArtifact::from_json(&text).unwrap() {
            ModelArtifact::DeepFm(back) => {
                assert_eq!(back, pruned);
                assert_eq!(back.layout().layers[0].inputs, 3 * 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schema_hash_is_enforced() {
        let schema = toy_schema(3, 0.1);
        let m = init_model(&schema, &ModelConfig::default()).unwrap();
        let text = ModelArtifact::DeepFm(m).to_json();
        assert!(ModelArtifact::from_json_for_schema(&text, &schema).is_ok());
        let other = toy_schema(3, 0.05);
        assert!(matches!(
            ModelArtifact::from_json_for_schema(&text, &other),
            Err(Error::ModelMismatch(_))
        ));
    }

    #[test]
    fn rejects_inconsistent_shapes() {
        let schema = toy_schema(3, 0.1);
        let m = init_model(&schema, &ModelConfig::default()).unwrap();
        let text = ModelArtifact::DeepFm(m).to_json();
        let broken = text.replacen("\"embedding_dim\":3", "\"embedding_dim\":4", 1);
        assert!(ModelArtifact::from_json(&broken).is_err());
        assert!(ModelArtifact::from_json("{}").is_err());
    }
}
