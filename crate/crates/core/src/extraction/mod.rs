//! Datapath extraction: per candidate layer, build and solve the quadratic
//! relaxation of critical-feature-map selection, threshold the importance
//! vector, then connect critical feature maps of adjacent candidate layers.

mod qp;
mod solver;

pub use qp::{build_qp, contributions, default_lambda, taylor_gap, QuadraticProgram, TaylorGap};
pub use solver::{solve, SolveReport, SolverOptions};

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nnet::{ActivationTrace, ExampleSet, ModelGraph};

pub const ADVERSARIAL_TAG: &str = "adversarial";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LayerSelector {
    /// Every relu output and residual add output.
    #[default]
    PostActivation,
    Explicit { layers: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    /// Feature maps with importance `>= threshold` are critical.
    pub threshold: f64,
    /// Keep the `k` most important feature maps instead of thresholding.
    pub top_k: Option<usize>,
    /// Overrides the per-layer default `0.1 / n²`.
    pub lambda: Option<f64>,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub layers: LayerSelector,
    /// Class whose probability is explained; `None` picks the group's shared class.
    pub target: Option<usize>,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            threshold: 0.5,
            top_k: None,
            lambda: None,
            max_iterations: 200,
            tolerance: 1e-6,
            layers: LayerSelector::PostActivation,
            target: None,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be >= 1".into()));
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::InvalidArgument("tolerance must be positive".into()));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {l}")));
            }
        }
        if self.top_k == Some(0) {
            return Err(Error::InvalidArgument("top_k must be >= 1".into()));
        }
        Ok(())
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
        }
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    /// Layer indices selected for analysis, in topological order.
    pub fn candidate_layers(&self, model: &ModelGraph) -> Result<Vec<usize>> {
        let mut layers = match &self.layers {
            LayerSelector::PostActivation => model.post_activation_layers(),
            LayerSelector::Explicit { layers } => layers
                .iter()
                .map(|id| model.layer_index(id))
                .collect::<Result<Vec<_>>>()?,
        };
        layers.sort_unstable();
        layers.dedup();
        if layers.is_empty() {
            return Err(Error::InvalidArgument("no candidate layers".into()));
        }
        Ok(layers)
    }
}

/// Solves the program at one layer; delegates to the projected Newton solver.
pub fn solve_qp(qp: &QuadraticProgram, config: &ExtractionConfig) -> Result<SolveReport> {
    solve(qp, &config.solver_options())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDatapath {
    pub layer: String,
    /// Continuous importance `z_j ∈ [0, 1]` per feature map.
    pub importance: Vec<f64>,
    /// Critical feature-map ids, ascending.
    pub critical: Vec<usize>,
    pub threshold: f64,
    pub lambda: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DatapathEdge {
    pub from_layer: usize,
    pub from_map: usize,
    pub to_layer: usize,
    pub to_map: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupDescriptor {
    pub name: String,
    pub hash: String,
    pub count: usize,
    pub target_class: usize,
}

/// Critical feature maps per candidate layer and their connections.
///
/// Edge layer fields index into `layers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Datapath {
    pub model_hash: String,
    pub group: GroupDescriptor,
    pub config: ExtractionConfig,
    pub layers: Vec<LayerDatapath>,
    pub edges: Vec<DatapathEdge>,
    pub content_hash: String,
}

impl Datapath {
    pub fn layer(&self, id: &str) -> Option<&LayerDatapath> {
        self.layers.iter().find(|l| l.layer == id)
    }

    pub fn critical(&self, id: &str) -> Option<&[usize]> {
        self.layer(id).map(|l| l.critical.as_slice())
    }

    fn compute_hash(&self) -> String {
        let mut unhashed = self.clone();
        unhashed.content_hash.clear();
        hex::encode(Sha256::digest(serde_json::to_vec(&unhashed).expect("datapath serializes")))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("datapath serializes");
        s.push('\n');
        s
    }

    /// Parses a datapath document and verifies its content hash.
    pub fn from_json(text: &str) -> Result<Self> {
        let dp: Datapath = serde_json::from_str(text)?;
        if dp.compute_hash() != dp.content_hash {
            return Err(Error::Format("datapath content hash does not match".into()));
        }
        Ok(dp)
    }
}

/// Most frequent value, lowest on ties.
fn mode(values: impl Iterator<Item = usize>) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(v, _)| v)
}

/// The class a group's datapath explains: the explicit override, else the
/// common predicted class for an all-adversarial group, else the common label.
pub fn group_target(model: &ModelGraph, set: &ExampleSet, target: Option<usize>) -> Result<usize> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("empty example set".into()));
    }
    let t = match target {
        Some(t) => t,
        None if set.examples.iter().all(|e| e.group_tag == ADVERSARIAL_TAG) => {
            let preds = set
                .examples
                .iter()
                .map(|e| model.forward(e, None).map(|t| t.predicted_class))
                .collect::<Result<Vec<_>>>()?;
            mode(preds.into_iter()).expect("nonempty")
        }
        None => mode(set.examples.iter().map(|e| e.label)).expect("nonempty"),
    };
    if t >= model.num_classes() {
        return Err(Error::OutOfRange {
            index: t,
            len: model.num_classes(),
        });
    }
    Ok(t)
}

/// Traces with gradients for every example, targeting `target`.
pub fn trace_set(model: &ModelGraph, set: &ExampleSet, target: usize) -> Result<Vec<ActivationTrace>> {
    set.examples
        .par_iter()
        .map(|e| model.trace(e, Some(target)))
        .collect()
}

/// Indices of critical feature maps under the configured discretization.
pub fn critical_set(z: &[f64], config: &ExtractionConfig) -> Vec<usize> {
    match config.top_k {
        Some(k) => {
            let mut idx: Vec<usize> = (0..z.len()).collect();
            idx.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
            idx.truncate(k);
            idx.sort_unstable();
            idx
        }
        None => (0..z.len()).filter(|&j| z[j] >= config.threshold).collect(),
    }
}

/// For each candidate layer, the candidate layers reached from it without
/// passing through another candidate.
pub fn candidate_successors(model: &ModelGraph, candidates: &[usize]) -> Vec<Vec<usize>> {
    let is_candidate: Vec<bool> = (0..model.len()).map(|i| candidates.contains(&i)).collect();
    candidates
        .iter()
        .map(|&from| {
            let mut seen = vec![false; model.len()];
            let mut stack = vec![from];
            let mut out = Vec::new();
            while let Some(n) = stack.pop() {
                for &c in model.consumers_of(n) {
                    if seen[c] {
                        continue;
                    }
                    seen[c] = true;
                    if is_candidate[c] {
                        out.push(c);
                    } else {
                        stack.push(c);
                    }
                }
            }
            out.sort_unstable();
            out
        })
        .collect()
}

/// Extraction from precomputed traces (all targeting `group.target_class`).
pub fn extract_from_traces(
    model: &ModelGraph,
    group: GroupDescriptor,
    traces: &[ActivationTrace],
    config: &ExtractionConfig,
) -> Result<Datapath> {
    config.validate()?;
    if traces.is_empty() {
        return Err(Error::InvalidArgument("empty example set".into()));
    }
    let candidates = config.candidate_layers(model)?;
    let layers: Vec<LayerDatapath> = candidates
        .par_iter()
        .map(|&idx| {
            let id = &model.node(idx).id;
            let qp = build_qp(model, traces, id, config.lambda)?;
            let report = solve_qp(&qp, config)?;
            Ok(LayerDatapath {
                layer: id.clone(),
                critical: critical_set(&report.z, config),
                importance: report.z,
                threshold: config.threshold,
                lambda: qp.lambda,
                objective: report.objective,
                iterations: report.iterations,
                converged: report.converged,
            })
        })
        .collect::<Result<_>>()?;

    let successors = candidate_successors(model, &candidates);
    let mut edges = Vec::new();
    for (li, succ) in successors.iter().enumerate() {
        for s in succ {
            let lj = candidates.iter().position(|c| c == s).expect("successor is a candidate");
            for &a in &layers[li].critical {
                for &b in &layers[lj].critical {
                    edges.push(DatapathEdge {
                        from_layer: li,
                        from_map: a,
                        to_layer: lj,
                        to_map: b,
                    });
                }
            }
        }
    }
    edges.sort_unstable();

    let mut dp = Datapath {
        model_hash: model.hash().to_string(),
        group,
        config: config.clone(),
        layers,
        edges,
        content_hash: String::new(),
    };
    dp.content_hash = dp.compute_hash();
    Ok(dp)
}

/// Extracts the datapath of an example set.
pub fn extract_datapath(model: &ModelGraph, set: &ExampleSet, config: &ExtractionConfig) -> Result<Datapath> {
    config.validate()?;
    let target = group_target(model, set, config.target)?;
    let traces = trace_set(model, set, target)?;
    let group = GroupDescriptor {
        name: set.name.clone(),
        hash: set.hash()?,
        count: set.len(),
        target_class: target,
    };
    extract_from_traces(model, group, &traces, config)
}
