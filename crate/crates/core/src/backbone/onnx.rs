//! Exported backbones in ONNX form, executed with tract.
//!
//! The graph must take one `(1, 3, 224, 224)` float input and produce one
//! `(1, feature_dim)` float output with global pooling already applied.

use std::fs;
use std::sync::Arc;

use prost::Message;
use rand::Rng;
use tract_onnx::pb;
use tract_onnx::prelude::*;

use super::{BackboneError, BackboneKind, BackboneSpec, FeatureExtractor, InputTensor};
use crate::seed::derived_rng;

pub struct OnnxBackbone {
    plan: Arc<TypedRunnableModel>,
    dim: usize,
    input_size: usize,
}

fn model_err(e: impl std::fmt::Display) -> BackboneError {
    BackboneError::Model(e.to_string())
}

impl OnnxBackbone {
    pub fn load(spec: &BackboneSpec) -> Result<Self, BackboneError> {
        let bytes = fs::read(&spec.model_path).map_err(|source| BackboneError::Io {
            path: spec.model_path.clone(),
            source,
        })?;
        Self::from_bytes(&bytes, spec.kind, spec.feature_dim, spec.input_size as usize)
    }

    pub fn from_bytes(
        bytes: &[u8],
        kind: BackboneKind,
        feature_dim: usize,
        input_size: usize,
    ) -> Result<Self, BackboneError> {
        let model = tract_onnx::onnx()
            .model_for_read(&mut &bytes[..])
            .and_then(|m| {
                m.with_input_fact(
                    0,
                    InferenceFact::dt_shape(f32::datum_type(), tvec!(1, 3, input_size, input_size)),
                )
            })
            .and_then(|m| m.into_optimized())
            .map_err(model_err)?;
        if model.outputs.len() != 1 {
            return Err(BackboneError::Model(format!(
                "expected one graph output, found {}",
                model.outputs.len()
            )));
        }
        let shape: Vec<usize> = model
            .output_fact(0)
            .map_err(model_err)?
            .shape
            .as_concrete()
            .map(|s| s.to_vec())
            .ok_or_else(|| BackboneError::Model("graph output shape is not concrete".into()))?;
        if shape != [1, feature_dim] {
            return Err(BackboneError::ShapeMismatch {
                backbone: kind,
                expected: feature_dim,
                actual: shape,
            });
        }
        let plan = model.into_runnable().map_err(model_err)?;
        Ok(Self {
            plan,
            dim: feature_dim,
            input_size,
        })
    }
}

impl FeatureExtractor for OnnxBackbone {
    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, input: &InputTensor) -> Result<Vec<f32>, BackboneError> {
        if input.size as usize != self.input_size {
            return Err(BackboneError::Model(format!(
                "input is {0}x{0}, network expects {1}x{1}",
                input.size, self.input_size
            )));
        }
        let tensor = Tensor::from_shape(&input.shape(), &input.data).map_err(model_err)?;
        let outputs = self.plan.run(tvec!(tensor.into_tvalue())).map_err(model_err)?;
        let view = outputs[0].to_plain_array_view::<f32>().map_err(model_err)?;
        Ok(view.iter().copied().collect())
    }
}

fn tensor_type(dims: &[i64]) -> Option<pb::TypeProto> {
    Some(pb::TypeProto {
        value: Some(pb::type_proto::Value::TensorType(pb::type_proto::Tensor {
            elem_type: 1,
            shape: Some(pb::TensorShapeProto {
                dim: dims
                    .iter()
                    .map(|&d| pb::tensor_shape_proto::Dimension {
                        value: Some(pb::tensor_shape_proto::dimension::Value::DimValue(d)),
                        ..Default::default()
                    })
                    .collect(),
            }),
        })),
        ..Default::default()
    })
}

fn node(op: &str, inputs: &[&str], output: &str, attribute: Vec<pb::AttributeProto>) -> pb::NodeProto {
    pb::NodeProto {
        input: inputs.iter().map(|s| s.to_string()).collect(),
        output: vec![output.to_string()],
        name: format!("{op}_{output}"),
        op_type: op.to_string(),
        attribute,
        ..Default::default()
    }
}

/// Serialized stand-in backbone: global average pool over the three input
/// channels followed by a fixed random `3 x feature_dim` projection. It has
/// the same interface as an exported network and is used to smoke-test the
/// extraction path without downloading weights.
pub fn pooled_projection_model(feature_dim: usize, seed: u64) -> Vec<u8> {
    let mut rng = derived_rng(seed, &[b"pooled-projection"]);
    let weights: Vec<f32> = (0..3 * feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let graph = pb::GraphProto {
        name: "pooled_projection".into(),
        node: vec![
            node("GlobalAveragePool", &["input"], "pooled", vec![]),
            node(
                "Flatten",
                &["pooled"],
                "flat",
                vec![pb::AttributeProto {
                    name: "axis".into(),
                    r#type: 2,
                    i: 1,
                    ..Default::default()
                }],
            ),
            node("MatMul", &["flat", "projection"], "features", vec![]),
        ],
        initializer: vec![pb::TensorProto {
            name: "projection".into(),
            dims: vec![3, feature_dim as i64],
            data_type: 1,
            float_data: weights,
            ..Default::default()
        }],
        input: vec![pb::ValueInfoProto {
            name: "input".into(),
            r#type: tensor_type(&[1, 3, 224, 224]),
            ..Default::default()
        }],
        output: vec![pb::ValueInfoProto {
            name: "features".into(),
            r#type: tensor_type(&[1, feature_dim as i64]),
            ..Default::default()
        }],
        ..Default::default()
    };
    pb::ModelProto {
        ir_version: 7,
        opset_import: vec![pb::OperatorSetIdProto {
            domain: String::new(),
            version: 13,
        }],
        producer_name: "cxr-core".into(),
        graph: Some(graph),
        ..Default::default()
    }
    .encode_to_vec()
}
