//! Session state and the pure computations behind each route.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use datapath_core::extraction::Datapath;
use datapath_core::layout::{
    collapse, doi_from_layers, euler_layout, expand, layer_doi, layer_view_for, treecut, EulerGroup, EulerLayout,
    EulerOptions, LayerView, LayerViewOptions, MAX_COMPARED,
};
use datapath_core::neuronview::{activation_heatmap, HeatMap};
use datapath_core::nnet::{ActivationTrace, ExampleSet, ModelGraph};
use datapath_core::stats::{comparison_statistics, uncertainty_score, LayerStatistic, StatisticKind};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{ApiError, ApiResult};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedImage {
    pub image: usize,
    pub label: usize,
    pub predicted_class: usize,
    pub uncertainty: f64,
}

pub struct Group {
    pub set: Arc<ExampleSet>,
    pub hash: String,
    pub traces: Arc<Vec<ActivationTrace>>,
    pub ranking: Vec<RankedImage>,
}

#[derive(Default)]
pub struct Session {
    pub model: Option<Arc<ModelGraph>>,
    pub groups: BTreeMap<String, Group>,
    /// Datapaths by cache key.
    pub datapaths: HashMap<String, Arc<Datapath>>,
    /// Most recent datapath id per group.
    pub latest: BTreeMap<String, String>,
    pub comparison: Vec<String>,
    /// Explicit treecut after expand/collapse; `None` means the initial treecut.
    pub visible: Option<Vec<usize>>,
}

/// Content key of an extraction: model, group and config hashes.
pub fn cache_key(model_hash: &str, group_hash: &str, config_hash: &str) -> String {
    let mut h = Sha256::new();
    for part in [model_hash, group_hash, config_hash] {
        h.update(part.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Uncertainty-ranked image list, most uncertain first.
pub fn rank_images(set: &ExampleSet, traces: &[ActivationTrace]) -> Vec<RankedImage> {
    let mut out: Vec<RankedImage> = set
        .examples
        .iter()
        .zip(traces)
        .enumerate()
        .map(|(i, (e, t))| RankedImage {
            image: i,
            label: e.label,
            predicted_class: t.predicted_class,
            uncertainty: uncertainty_score(t),
        })
        .collect();
    out.sort_by(|a, b| b.uncertainty.total_cmp(&a.uncertainty).then(a.image.cmp(&b.image)));
    out
}

impl Session {
    pub fn model(&self) -> ApiResult<&Arc<ModelGraph>> {
        self.model
            .as_ref()
            .ok_or_else(|| ApiError::unprocessable("no_model", "upload a model first"))
    }

    pub fn group(&self, name: &str) -> ApiResult<&Group> {
        self.groups
            .get(name)
            .ok_or_else(|| ApiError::not_found("unknown_group", format!("no group named `{name}`")))
    }

    pub fn datapath_for(&self, group: &str) -> ApiResult<&Arc<Datapath>> {
        self.group(group)?;
        let id = self
            .latest
            .get(group)
            .ok_or_else(|| ApiError::unprocessable("not_extracted", format!("group `{group}` has no datapath yet")))?;
        Ok(&self.datapaths[id])
    }

    pub fn set_comparison(&mut self, names: Vec<String>) -> ApiResult<()> {
        if names.is_empty() || names.len() > MAX_COMPARED {
            return Err(ApiError::unprocessable(
                "comparison_size",
                format!("compare between 1 and {MAX_COMPARED} groups, got {}", names.len()),
            ));
        }
        for n in &names {
            self.group(n)?;
        }
        if self.comparison != names {
            self.comparison = names;
            self.visible = None;
        }
        Ok(())
    }

    /// Statistics between the first two compared groups (reference first).
    pub fn statistics(&self) -> ApiResult<Vec<LayerStatistic>> {
        let model = self.model()?;
        if self.comparison.len() < 2 {
            return Err(ApiError::unprocessable(
                "comparison_size",
                "layer statistics need two compared groups",
            ));
        }
        let (n, a) = (&self.comparison[0], &self.comparison[1]);
        let (gn, ga) = (self.group(n)?, self.group(a)?);
        let (dn, da) = (self.datapath_for(n)?, self.datapath_for(a)?);
        Ok(comparison_statistics(model, &gn.traces, &ga.traces, dn, da)?)
    }

    pub fn visible(&self, stats: &[LayerStatistic], budget: usize) -> ApiResult<Vec<usize>> {
        if let Some(v) = &self.visible {
            return Ok(v.clone());
        }
        let model = self.model()?;
        let h = model.hierarchy();
        let doi = doi_from_layers(h, &layer_doi(model, stats));
        Ok(treecut(h, &doi, budget)?.visible)
    }

    pub fn layer_layout(&self, kind: StatisticKind, opts: &LayerViewOptions) -> ApiResult<LayerView> {
        let stats = self.statistics()?;
        let visible = self.visible(&stats, opts.budget)?;
        Ok(layer_view_for(self.model()?, &visible, kind, &stats, opts)?)
    }

    /// Expands or collapses a hierarchy node given by path. Expanding a leaf
    /// or an invisible node changes nothing.
    pub fn toggle(&mut self, path: &str, collapse_node: bool, opts: &LayerViewOptions) -> ApiResult<()> {
        let stats = self.statistics()?;
        let current = self.visible(&stats, opts.budget)?;
        let model = self.model()?;
        let h = model.hierarchy();
        let node = h
            .find(path)
            .ok_or_else(|| ApiError::not_found("unknown_node", format!("no hierarchy node `{path}`")))?;
        let next = if collapse_node {
            collapse(h, &current, node)
        } else {
            expand(h, &current, node)
        };
        self.visible = Some(next);
        Ok(())
    }

    pub fn feature_map_layout(&self, layer: &str, k: Option<usize>) -> ApiResult<EulerLayout> {
        let model = self.model()?;
        if self.comparison.is_empty() {
            return Err(ApiError::unprocessable("comparison_size", "no groups selected for comparison"));
        }
        model.layer_index(layer)?;
        let mut groups = Vec::with_capacity(self.comparison.len());
        for name in &self.comparison {
            groups.push(EulerGroup {
                name,
                datapath: self.datapath_for(name)?,
                traces: &self.group(name)?.traces,
            });
        }
        let opts = EulerOptions {
            k,
            difference: (groups.len() >= 2).then_some((0, 1)),
            ..EulerOptions::default()
        };
        Ok(euler_layout(model, layer, &groups, &opts)?)
    }

    pub fn heatmap(&self, group: &str, image: usize, layer: &str, feature_map: usize) -> ApiResult<HeatMap> {
        let model = self.model()?;
        let g = self.group(group)?;
        let trace = g.traces.get(image).ok_or_else(|| {
            ApiError::not_found("unknown_image", format!("group `{group}` has {} images", g.traces.len()))
        })?;
        Ok(activation_heatmap(model, trace, layer, feature_map)?)
    }
}
