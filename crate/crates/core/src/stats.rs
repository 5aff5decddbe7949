//! Per-layer comparison statistics between two example groups.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::Datapath;
use crate::nnet::{dot, ActivationTrace, ModelGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticKind {
    ActivationSimilarity,
    TopologicalSimilarity,
    MeanActivation,
    ActivationDifference,
}

impl StatisticKind {
    /// Natural value range, used to place dots on `[0, 1]`.
    pub fn natural_range(&self) -> (f64, f64) {
        match self {
            StatisticKind::ActivationSimilarity => (-1.0, 1.0),
            StatisticKind::TopologicalSimilarity => (0.0, 1.0),
            // unbounded statistics are normalized by the caller's observed range
            StatisticKind::MeanActivation | StatisticKind::ActivationDifference => (f64::NAN, f64::NAN),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "activation_similarity" => StatisticKind::ActivationSimilarity,
            "topological_similarity" => StatisticKind::TopologicalSimilarity,
            "mean_activation" => StatisticKind::MeanActivation,
            "activation_difference" => StatisticKind::ActivationDifference,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStatistic {
    pub layer: String,
    pub kind: StatisticKind,
    pub value: f64,
    /// Set when an empty critical set forced the statistic over all feature maps.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Similarity {
    pub value: f64,
    pub fallback: bool,
}

/// Cosine similarity; two zero vectors count as identical, one zero vector as orthogonal.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (aa, bb) = (dot(a, a), dot(b, b));
    match (aa == 0.0, bb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => {
            // sqrt(fl(d·d)) == d exactly, so a vector against itself gives exactly 1
            let prod = aa * bb;
            let denom = if prod.is_normal() { prod.sqrt() } else { aa.sqrt() * bb.sqrt() };
            (dot(a, b) / denom).clamp(-1.0, 1.0)
        }
    }
}

fn gather(trace: &ActivationTrace, layer: usize, maps: &[usize]) -> Vec<f64> {
    let t = &trace.activations[layer];
    maps.iter().flat_map(|&j| t.channel(j).iter().copied()).collect()
}

/// Mean cosine similarity over aligned pairs of adversarial/normal traces,
/// restricted to the given feature maps (or all of them when `maps` is empty).
pub fn activation_similarity_over(
    model: &ModelGraph,
    traces_a: &[ActivationTrace],
    traces_n: &[ActivationTrace],
    layer: &str,
    maps: &[usize],
) -> Result<Similarity> {
    if traces_a.len() != traces_n.len() {
        return Err(Error::InvalidArgument(format!(
            "unpaired trace lists: {} vs {}",
            traces_a.len(),
            traces_n.len()
        )));
    }
    if traces_a.is_empty() {
        return Err(Error::InvalidArgument("no trace pairs".into()));
    }
    let idx = model.layer_index(layer)?;
    let n = model.node(idx).channels;
    if let Some(&j) = maps.iter().find(|&&j| j >= n) {
        return Err(Error::OutOfRange { index: j, len: n });
    }
    let fallback = maps.is_empty();
    let all: Vec<usize>;
    let maps = if fallback {
        all = (0..n).collect();
        &all
    } else {
        maps
    };
    let mut sum = 0.0;
    for (a, b) in traces_a.iter().zip(traces_n) {
        model.check_trace(a)?;
        model.check_trace(b)?;
        sum += cosine(&gather(a, idx, maps), &gather(b, idx, maps));
    }
    Ok(Similarity {
        value: sum / traces_a.len() as f64,
        fallback,
    })
}

/// Activation similarity restricted to the union of both datapaths' critical
/// sets at `layer`. A layer absent from a datapath contributes no critical maps.
pub fn activation_similarity(
    model: &ModelGraph,
    traces_a: &[ActivationTrace],
    traces_n: &[ActivationTrace],
    dp_a: &Datapath,
    dp_n: &Datapath,
    layer: &str,
) -> Result<Similarity> {
    let union: BTreeSet<usize> = dp_a
        .critical(layer)
        .unwrap_or(&[])
        .iter()
        .chain(dp_n.critical(layer).unwrap_or(&[]))
        .copied()
        .collect();
    let maps: Vec<usize> = union.into_iter().collect();
    activation_similarity_over(model, traces_a, traces_n, layer, &maps)
}

/// Jaccard similarity of two id sets; 1.0 when both are empty.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let a: BTreeSet<_> = a.iter().collect();
    let b: BTreeSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

pub fn topological_similarity(dp_a: &Datapath, dp_n: &Datapath, layer: &str) -> Result<f64> {
    let a = dp_a
        .critical(layer)
        .ok_or_else(|| Error::UnknownLayer(format!("{layer} (not in first datapath)")))?;
    let b = dp_n
        .critical(layer)
        .ok_or_else(|| Error::UnknownLayer(format!("{layer} (not in second datapath)")))?;
    Ok(jaccard(a, b))
}

/// Mean over traces of the total activation of feature map `j`.
pub fn mean_total_activation(model: &ModelGraph, traces: &[ActivationTrace], layer: &str, j: usize) -> Result<f64> {
    if traces.is_empty() {
        return Err(Error::InvalidArgument("no traces".into()));
    }
    let idx = model.layer_index(layer)?;
    let n = model.node(idx).channels;
    if j >= n {
        return Err(Error::OutOfRange { index: j, len: n });
    }
    let mut sum = 0.0;
    for t in traces {
        model.check_trace(t)?;
        sum += t.activations[idx].channel(j).iter().sum::<f64>();
    }
    Ok(sum / traces.len() as f64)
}

/// Normal-group mean total activation minus adversarial-group mean.
pub fn activation_difference(
    model: &ModelGraph,
    traces_n: &[ActivationTrace],
    traces_a: &[ActivationTrace],
    layer: &str,
    j: usize,
) -> Result<f64> {
    Ok(mean_total_activation(model, traces_n, layer, j)? - mean_total_activation(model, traces_a, layer, j)?)
}

/// Mean activation of a group over the given feature maps of a layer (all maps when empty).
pub fn mean_activation(model: &ModelGraph, traces: &[ActivationTrace], layer: &str, maps: &[usize]) -> Result<Similarity> {
    if traces.is_empty() {
        return Err(Error::InvalidArgument("no traces".into()));
    }
    let idx = model.layer_index(layer)?;
    let n = model.node(idx).channels;
    let fallback = maps.is_empty();
    let all: Vec<usize> = (0..n).collect();
    let maps = if fallback { &all[..] } else { maps };
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in traces {
        model.check_trace(t)?;
        for &j in maps {
            if j >= n {
                return Err(Error::OutOfRange { index: j, len: n });
            }
            let ch = t.activations[idx].channel(j);
            sum += ch.iter().sum::<f64>();
            count += ch.len();
        }
    }
    Ok(Similarity {
        value: sum / count as f64,
        fallback,
    })
}

/// Every statistic for every layer of the model, comparing a normal group with
/// its paired adversarial group. Layers outside both datapaths have empty
/// critical sets: similarity falls back to all maps and Jaccard is 1.0, both flagged.
pub fn comparison_statistics(
    model: &ModelGraph,
    traces_n: &[ActivationTrace],
    traces_a: &[ActivationTrace],
    dp_n: &Datapath,
    dp_a: &Datapath,
) -> Result<Vec<LayerStatistic>> {
    let both: Vec<ActivationTrace> = traces_n.iter().chain(traces_a).cloned().collect();
    let mut out = Vec::with_capacity(model.len() * 4);
    for node in model.nodes() {
        let layer = node.id.as_str();
        let union: BTreeSet<usize> = dp_a
            .critical(layer)
            .unwrap_or(&[])
            .iter()
            .chain(dp_n.critical(layer).unwrap_or(&[]))
            .copied()
            .collect();
        let maps: Vec<usize> = union.into_iter().collect();
        let sim = activation_similarity_over(model, traces_a, traces_n, layer, &maps)?;
        let (topo, topo_fallback) = match (dp_a.critical(layer), dp_n.critical(layer)) {
            (Some(a), Some(b)) => (jaccard(a, b), false),
            (a, b) => (jaccard(a.unwrap_or(&[]), b.unwrap_or(&[])), true),
        };
        let mean = mean_activation(model, &both, layer, &maps)?;
        let diff_maps: Vec<usize> = if maps.is_empty() { (0..node.channels).collect() } else { maps.clone() };
        let mut diff = 0.0;
        for &j in &diff_maps {
            diff += activation_difference(model, traces_n, traces_a, layer, j)?;
        }
        let row = |kind, value, fallback| LayerStatistic {
            layer: layer.to_string(),
            kind,
            value,
            fallback,
        };
        out.push(row(StatisticKind::ActivationSimilarity, sim.value, sim.fallback));
        out.push(row(StatisticKind::TopologicalSimilarity, topo, topo_fallback));
        out.push(row(StatisticKind::MeanActivation, mean.value, mean.fallback));
        out.push(row(StatisticKind::ActivationDifference, diff / diff_maps.len() as f64, maps.is_empty()));
    }
    Ok(out)
}

/// Normalized entropy of the softmax distribution, in `[0, 1]`.
pub fn uncertainty_score(trace: &ActivationTrace) -> f64 {
    let c = trace.probabilities.len();
    if c < 2 {
        return 0.0;
    }
    let h: f64 = trace
        .probabilities
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    (h / (c as f64).ln()).clamp(0.0, 1.0)
}
