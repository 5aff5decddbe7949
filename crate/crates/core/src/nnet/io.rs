//! Model and example file formats.
//!
//! A model is a JSON manifest (nodes, hierarchy via group paths, weight
//! descriptors) plus a sidecar of little-endian `f32` values in descriptor
//! order. Examples are a one-line JSON header followed by little-endian `f32`
//! pixels, height × width × channels per image.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::exec::{Example, Tensor};
use super::graph::{LayerNode, LayerParams, ModelGraph, Shape};
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "datapath-model";
pub const EXAMPLES_FORMAT: &str = "datapath-examples";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightDescriptor {
    pub layer: String,
    pub tensor: TensorRole,
    pub shape: Vec<usize>,
    /// Offset into the sidecar, in `f32` elements.
    pub offset: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub version: u32,
    pub nodes: Vec<LayerNode>,
    pub weights: Vec<WeightDescriptor>,
    /// Sidecar file name, relative to the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_file: Option<String>,
}

fn weight_shape(model: &ModelGraph, idx: usize) -> Vec<usize> {
    let node = model.node(idx);
    match node.kind {
        super::LayerKind::Conv { kernel, .. } => {
            let ic = model.node(model.inputs_of(idx)[0]).channels;
            vec![node.channels, ic, kernel, kernel]
        }
        _ => {
            let len = model.node(model.inputs_of(idx)[0]).shape().len();
            vec![node.channels, len]
        }
    }
}

/// Manifest plus sidecar bytes for a model.
pub fn encode_model(model: &ModelGraph, weights_file: Option<&str>) -> (ModelManifest, Vec<u8>) {
    let mut weights = Vec::new();
    let mut bytes = Vec::new();
    let mut offset = 0;
    for (idx, p) in model.all_params().iter().enumerate() {
        let Some(p) = p else { continue };
        let id = &model.node(idx).id;
        for (role, values, shape) in [
            (TensorRole::Weight, &p.weight, weight_shape(model, idx)),
            (TensorRole::Bias, &p.bias, vec![p.bias.len()]),
        ] {
            weights.push(WeightDescriptor {
                layer: id.clone(),
                tensor: role,
                shape,
                offset,
                count: values.len(),
            });
            offset += values.len();
            for &v in values.iter() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    let manifest = ModelManifest {
        format: MODEL_FORMAT.into(),
        version: FORMAT_VERSION,
        nodes: model.nodes().to_vec(),
        weights,
        weights_file: weights_file.map(str::to_string),
    };
    (manifest, bytes)
}

fn read_f32s(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "binary payload of {} bytes is not a whole number of f32 values",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Builds a validated model from a manifest and its sidecar bytes.
pub fn decode_model(manifest: &ModelManifest, weight_bytes: &[u8]) -> Result<ModelGraph> {
    if manifest.format != MODEL_FORMAT || manifest.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported model format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let values = read_f32s(weight_bytes)?;
    let expected: usize = manifest.weights.iter().map(|d| d.count).sum();
    if values.len() != expected {
        return Err(Error::Format(format!(
            "weights sidecar holds {} values, manifest describes {expected}",
            values.len()
        )));
    }
    let mut params: Vec<Option<LayerParams>> = vec![None; manifest.nodes.len()];
    for d in &manifest.weights {
        let idx = manifest
            .nodes
            .iter()
            .position(|n| n.id == d.layer)
            .ok_or_else(|| Error::UnknownLayer(d.layer.clone()))?;
        if d.shape.iter().product::<usize>() != d.count {
            return Err(Error::Format(format!(
                "descriptor for `{}` has shape {:?} but count {}",
                d.layer, d.shape, d.count
            )));
        }
        let slice = values
            .get(d.offset..d.offset + d.count)
            .ok_or_else(|| Error::Format(format!("descriptor for `{}` exceeds the sidecar", d.layer)))?
            .to_vec();
        let p = params[idx].get_or_insert_with(|| LayerParams {
            weight: Vec::new(),
            bias: Vec::new(),
        });
        match d.tensor {
            TensorRole::Weight => p.weight = slice,
            TensorRole::Bias => p.bias = slice,
        }
    }
    ModelGraph::new(manifest.nodes.clone(), params)
}

/// Writes `<manifest_path>` and a sidecar `<stem>.bin` next to it.
pub fn write_model(model: &ModelGraph, manifest_path: &Path) -> Result<()> {
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model");
    let weights_name = format!("{stem}.bin");
    let (manifest, bytes) = encode_model(model, Some(&weights_name));
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    fs::write(dir.join(&weights_name), bytes)?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(manifest_path, text)?;
    Ok(())
}

pub fn read_model(manifest_path: &Path) -> Result<ModelGraph> {
    let manifest: ModelManifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
    let name = manifest
        .weights_file
        .as_deref()
        .ok_or_else(|| Error::Format("manifest does not name its weights file".into()))?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let bytes = fs::read(dir.join(name))?;
    decode_model(&manifest, &bytes)
}

/// Single-payload form for uploads: compact manifest JSON, a newline, then the sidecar bytes.
pub fn model_to_bundle(model: &ModelGraph) -> Vec<u8> {
    let (manifest, bytes) = encode_model(model, None);
    let mut out = serde_json::to_vec(&manifest).expect("manifest serializes");
    out.push(b'\n');
    out.extend_from_slice(&bytes);
    out
}

pub fn model_from_bundle(bundle: &[u8]) -> Result<ModelGraph> {
    let (head, body) = split_header(bundle)?;
    let manifest: ModelManifest = serde_json::from_slice(head)?;
    decode_model(&manifest, body)
}

fn split_header(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header line".into()))?;
    Ok((&bytes[..nl], &bytes[nl + 1..]))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamplesHeader {
    pub format: String,
    pub version: u32,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub labels: Vec<usize>,
    pub group_tags: Vec<String>,
}

pub fn encode_examples(examples: &[Example]) -> Result<Vec<u8>> {
    let shape = examples
        .first()
        .map(|e| e.pixels.shape)
        .unwrap_or(Shape::new(1, 1, 1));
    if let Some(e) = examples.iter().find(|e| e.pixels.shape != shape) {
        return Err(Error::ShapeMismatch {
            layer: "examples".into(),
            expected: shape.to_string(),
            actual: e.pixels.shape.to_string(),
        });
    }
    let header = ExamplesHeader {
        format: EXAMPLES_FORMAT.into(),
        version: FORMAT_VERSION,
        count: examples.len(),
        height: shape.height,
        width: shape.width,
        channels: shape.channels,
        labels: examples.iter().map(|e| e.label).collect(),
        group_tags: examples.iter().map(|e| e.group_tag.clone()).collect(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for e in examples {
        for y in 0..shape.height {
            for x in 0..shape.width {
                for c in 0..shape.channels {
                    out.extend_from_slice(&(e.pixels.at(c, y, x) as f32).to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

pub fn decode_examples(bytes: &[u8]) -> Result<Vec<Example>> {
    let (head, body) = split_header(bytes)?;
    let header: ExamplesHeader = serde_json::from_slice(head)?;
    if header.format != EXAMPLES_FORMAT || header.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported examples format {} v{}",
            header.format, header.version
        )));
    }
    if header.labels.len() != header.count || header.group_tags.len() != header.count {
        return Err(Error::Format("labels/group_tags length differs from count".into()));
    }
    let shape = Shape::new(header.channels, header.height, header.width);
    let values = read_f32s(body)?;
    if values.len() != header.count * shape.len() {
        return Err(Error::Format(format!(
            "payload holds {} values, header describes {}",
            values.len(),
            header.count * shape.len()
        )));
    }
    let mut out = Vec::with_capacity(header.count);
    for (k, chunk) in values.chunks_exact(shape.len().max(1)).take(header.count).enumerate() {
        let mut t = Tensor::zeros(shape);
        let mut it = chunk.iter();
        for y in 0..shape.height {
            for x in 0..shape.width {
                for c in 0..shape.channels {
                    t.data[(c * shape.height + y) * shape.width + x] = *it.next().expect("sized chunk");
                }
            }
        }
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("pixels of example {k}")));
        }
        out.push(Example::new(t, header.labels[k], header.group_tags[k].clone()));
    }
    Ok(out)
}

pub fn write_examples(path: &Path, examples: &[Example]) -> Result<()> {
    fs::write(path, encode_examples(examples)?)?;
    Ok(())
}

pub fn read_examples(path: &Path) -> Result<Vec<Example>> {
    decode_examples(&fs::read(path)?)
}
