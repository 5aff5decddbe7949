//! Neuron-level evidence: activation heat maps and occlusion discrepancy maps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{ActivationTrace, Example, ModelGraph, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Patch side for an input of the given side: 8 at 224 pixels and above, 2 below.
pub fn default_patch_size(side: usize) -> usize {
    if side >= 224 {
        8
    } else {
        2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatMap {
    pub layer: String,
    pub feature_map: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major values in `[-1, 1]`; negative is drawn red, positive green.
    pub grid: Vec<f64>,
    /// Maximum absolute activation the grid was divided by (0 for an all-zero map).
    pub scale: f64,
}

impl HeatMap {
    pub fn row(&self, y: usize) -> &[f64] {
        &self.grid[y * self.width..(y + 1) * self.width]
    }
}

/// Divides by the maximum absolute value; all-zero input stays zero.
pub fn normalize_grid(values: &[f64]) -> (Vec<f64>, f64) {
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return (vec![0.0; values.len()], 0.0);
    }
    (values.iter().map(|v| (v / scale).clamp(-1.0, 1.0)).collect(), scale)
}

pub fn activation_heatmap(model: &ModelGraph, trace: &ActivationTrace, layer: &str, feature_map: usize) -> Result<HeatMap> {
    model.check_trace(trace)?;
    let idx = model.layer_index(layer)?;
    let t = &trace.activations[idx];
    if feature_map >= t.shape.channels {
        return Err(Error::OutOfRange {
            index: feature_map,
            len: t.shape.channels,
        });
    }
    let (grid, scale) = normalize_grid(t.channel(feature_map));
    Ok(HeatMap {
        layer: layer.to_string(),
        feature_map,
        height: t.shape.height,
        width: t.shape.width,
        grid,
        scale,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscrepancyTarget {
    pub layer: String,
    pub feature_map: usize,
    /// `(y, x)` of a single neuron; `None` targets the feature map's spatial mean.
    #[serde(default)]
    pub neuron: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyMap {
    pub image: usize,
    pub target: DiscrepancyTarget,
    /// `neuron` or `feature_map_mean`.
    pub aggregate: String,
    pub patch_size: usize,
    pub threshold: f64,
    pub rows: usize,
    pub cols: usize,
    /// Unoccluded target value.
    pub baseline: f64,
    /// `|Δ|` per patch, row-major.
    pub delta: Vec<f64>,
    pub important: Vec<bool>,
    /// Set when no patch changes the target, so nothing is marked.
    pub degenerate: bool,
    pub height: usize,
    pub width: usize,
    /// Per-pixel keep flags: pixels of important patches are kept, the rest dimmed.
    pub preview: Vec<bool>,
}

impl DiscrepancyMap {
    pub fn is_important(&self, row: usize, col: usize) -> bool {
        self.important[row * self.cols + col]
    }
}

/// Per-channel mean pixel value of a dataset, used as the occlusion fill.
pub fn dataset_mean(examples: &[Example]) -> Result<Vec<f64>> {
    let first = examples
        .first()
        .ok_or_else(|| Error::InvalidArgument("dataset is empty".into()))?;
    let shape = first.pixels.shape;
    let mut sums = vec![0.0; shape.channels];
    for e in examples {
        if e.pixels.shape != shape {
            return Err(Error::InvalidArgument("examples differ in shape".into()));
        }
        for (c, s) in sums.iter_mut().enumerate() {
            *s += e.pixels.channel(c).iter().sum::<f64>();
        }
    }
    let n = (examples.len() * shape.spatial()) as f64;
    Ok(sums.into_iter().map(|s| s / n).collect())
}

fn target_value(t: &Tensor, target: &DiscrepancyTarget) -> f64 {
    let ch = t.channel(target.feature_map);
    match target.neuron {
        Some((y, x)) => ch[y * t.shape.width + x],
        None => ch.iter().sum::<f64>() / ch.len() as f64,
    }
}

/// Occlusion sensitivity: each `patch_size` tile is filled with `fill` (one
/// value per channel) and the change of the target activation recorded.
/// A patch is important when `|Δ| ≥ threshold · max |Δ|`.
pub fn discrepancy_map(
    model: &ModelGraph,
    example: &Example,
    image: usize,
    target: &DiscrepancyTarget,
    patch_size: usize,
    threshold: f64,
    fill: &[f64],
) -> Result<DiscrepancyMap> {
    let shape = model.input_shape();
    if example.pixels.shape != shape {
        return Err(Error::ShapeMismatch {
            layer: model.node(model.input_index()).id.clone(),
            expected: shape.to_string(),
            actual: example.pixels.shape.to_string(),
        });
    }
    if patch_size == 0 {
        return Err(Error::InvalidArgument("patch size must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold must lie in [0, 1], got {threshold}")));
    }
    if fill.len() != shape.channels || fill.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "fill needs {} finite channel values",
            shape.channels
        )));
    }
    let idx = model.layer_index(&target.layer)?;
    let tshape = model.node(idx).shape();
    if target.feature_map >= tshape.channels {
        return Err(Error::OutOfRange {
            index: target.feature_map,
            len: tshape.channels,
        });
    }
    if let Some((y, x)) = target.neuron {
        if y >= tshape.height || x >= tshape.width {
            return Err(Error::OutOfRange {
                index: y * tshape.width + x,
                len: tshape.spatial(),
            });
        }
    }

    let base_trace = model.forward(example, None)?;
    let baseline = target_value(&base_trace.activations[idx], target);
    let (h, w) = (shape.height, shape.width);
    let rows = h.div_ceil(patch_size);
    let cols = w.div_ceil(patch_size);

    let delta = (0..rows * cols)
        .into_par_iter()
        .map(|p| {
            let (r, c) = (p / cols, p % cols);
            let mut occluded = example.clone();
            for ch in 0..shape.channels {
                let plane = occluded.pixels.channel_mut(ch);
                for y in r * patch_size..((r + 1) * patch_size).min(h) {
                    for x in c * patch_size..((c + 1) * patch_size).min(w) {
                        plane[y * w + x] = fill[ch];
                    }
                }
            }
            let t = model.forward(&occluded, None)?;
            Ok((target_value(&t.activations[idx], target) - baseline).abs())
        })
        .collect::<Result<Vec<f64>>>()?;

    let max = delta.iter().fold(0.0f64, |m, &d| m.max(d));
    let degenerate = max == 0.0;
    let important: Vec<bool> = delta
        .iter()
        .map(|&d| !degenerate && d > 0.0 && d >= threshold * max)
        .collect();
    let preview = (0..h * w)
        .map(|i| important[(i / w / patch_size) * cols + (i % w) / patch_size])
        .collect();
    Ok(DiscrepancyMap {
        image,
        target: target.clone(),
        aggregate: if target.neuron.is_some() { "neuron" } else { "feature_map_mean" }.into(),
        patch_size,
        threshold,
        rows,
        cols,
        baseline,
        delta,
        important,
        degenerate,
        height: h,
        width: w,
        preview,
    })
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PGM (P5) of a row-major grid with values in `[0, 1]`.
pub fn pgm(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| to_byte(v)));
    out
}

/// Binary PPM (P6) of a heat map: red for negative, green for positive.
pub fn heatmap_ppm(map: &HeatMap) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", map.width, map.height).into_bytes();
    for &v in &map.grid {
        out.extend([to_byte(-v), to_byte(v), 0]);
    }
    out
}

/// Image with unimportant pixels dimmed to a quarter brightness, as PGM (one
/// channel) or PPM (three channels; other counts use the channel mean).
pub fn dimmed_preview(example: &Example, map: &DiscrepancyMap) -> Vec<u8> {
    let px = &example.pixels;
    let dim = |i: usize, v: f64| if map.preview[i] { v } else { v * 0.25 };
    match px.shape.channels {
        3 => {
            let mut out = format!("P6\n{} {}\n255\n", map.width, map.height).into_bytes();
            for i in 0..map.width * map.height {
                for c in 0..3 {
                    out.push(to_byte(dim(i, px.channel(c)[i])));
                }
            }
            out
        }
        n => {
            let gray: Vec<f64> = (0..map.width * map.height)
                .map(|i| dim(i, (0..n).map(|c| px.channel(c)[i]).sum::<f64>() / n as f64))
                .collect();
            pgm(map.width, map.height, &gray)
        }
    }
}
