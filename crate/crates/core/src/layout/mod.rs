//! Geometry for the layer-level and feature-map-level views.

mod euler;
mod kmeans;
mod segment;
mod treecut;

pub use euler::{
    euler_cells, euler_cells_for_layer, euler_layout, feature_vectors, glyph_count, treemap_layout, CellBoxes,
    CellView, ClusterView, EulerCell, EulerGroup, EulerLayout, EulerOptions, Rect, MAX_COMPARED,
};
pub use kmeans::{kmeans, Cluster, Clustering, DEFAULT_ITERATIONS, DEFAULT_MAX_K, DEFAULT_SEED};
pub use segment::{cuts_block, optimal_breaks, segment_dag, BreakCost, PlacedNode, SegmentedLayout};
pub use treecut::{collapse, doi_from_layers, expand, is_valid_cut, treecut, TreecutResult};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{Hierarchy, ModelGraph};
use crate::stats::{LayerStatistic, StatisticKind};

pub const DEFAULT_SEGMENT_LAMBDA: f64 = 5.0;
pub const DEFAULT_LINE_WIDTH: f64 = 12.0;
pub const DEFAULT_BUDGET: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dot {
    pub layer: String,
    pub x: f64,
}

/// Value range used to place dots: the statistic's natural range, or the
/// observed range over `stats` for unbounded kinds.
pub fn dot_range(kind: StatisticKind, stats: &[LayerStatistic]) -> (f64, f64) {
    let (lo, hi) = kind.natural_range();
    if lo.is_finite() {
        return (lo, hi);
    }
    stats
        .iter()
        .filter(|s| s.kind == kind && s.value.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.value), hi.max(s.value)))
}

/// One dot per layer under `node`, at the statistic value mapped to `[0, 1]`.
pub fn dot_plot_data(model: &ModelGraph, node: usize, kind: StatisticKind, stats: &[LayerStatistic]) -> Result<Vec<Dot>> {
    let h = model.hierarchy();
    if node >= h.len() {
        return Err(Error::OutOfRange { index: node, len: h.len() });
    }
    let (lo, hi) = dot_range(kind, stats);
    h.layers_under(node)
        .into_iter()
        .map(|l| {
            let id = &model.node(l).id;
            let s = stats
                .iter()
                .find(|s| s.kind == kind && &s.layer == id)
                .ok_or_else(|| Error::InvalidArgument(format!("missing {kind:?} statistic for layer `{id}`")))?;
            let x = if hi > lo { (s.value - lo) / (hi - lo) } else { 0.5 };
            Ok(Dot {
                layer: id.clone(),
                x: x.clamp(0.0, 1.0),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerViewOptions {
    pub budget: usize,
    pub line_width: f64,
    pub lambda: f64,
    pub leaf_width: f64,
    pub group_width: f64,
}

impl Default for LayerViewOptions {
    fn default() -> Self {
        LayerViewOptions {
            budget: DEFAULT_BUDGET,
            line_width: DEFAULT_LINE_WIDTH,
            lambda: DEFAULT_SEGMENT_LAMBDA,
            leaf_width: 1.0,
            group_width: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VisibleNode {
    pub node: usize,
    pub path: String,
    pub is_group: bool,
    pub doi: f64,
    pub dots: Vec<Dot>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerView {
    pub statistic: StatisticKind,
    pub visible: Vec<VisibleNode>,
    pub segments: SegmentedLayout,
}

/// DOI per layer: one minus its activation similarity. Layers without a
/// statistic get zero.
pub fn layer_doi(model: &ModelGraph, stats: &[LayerStatistic]) -> Vec<f64> {
    model
        .nodes()
        .iter()
        .map(|n| {
            stats
                .iter()
                .find(|s| s.kind == StatisticKind::ActivationSimilarity && s.layer == n.id)
                .map_or(0.0, |s| 1.0 - s.value)
        })
        .collect()
}

/// Orders visible nodes topologically: by the first layer they contain.
fn topological(h: &Hierarchy, visible: &[usize]) -> Vec<usize> {
    let mut v = visible.to_vec();
    v.sort_by_key(|&n| h.layers_under(n).into_iter().min().unwrap_or(usize::MAX));
    v
}

/// Segmented layer-level view for a given visible set.
pub fn layer_view_for(
    model: &ModelGraph,
    visible: &[usize],
    kind: StatisticKind,
    stats: &[LayerStatistic],
    opts: &LayerViewOptions,
) -> Result<LayerView> {
    let h = model.hierarchy();
    if !is_valid_cut(h, visible) {
        return Err(Error::InvalidArgument("visible nodes do not form a cut of the hierarchy".into()));
    }
    let doi = doi_from_layers(h, &layer_doi(model, stats));
    let order = topological(h, visible);
    let nodes: Vec<(usize, f64)> = order
        .iter()
        .map(|&n| {
            let w = if h.node(n).is_leaf() { opts.leaf_width } else { opts.group_width };
            (n, w)
        })
        .collect();
    let segments = segment_dag(h, &nodes, opts.line_width, opts.lambda)?;
    let visible = order
        .iter()
        .map(|&n| {
            Ok(VisibleNode {
                node: n,
                path: h.node(n).path.clone(),
                is_group: !h.node(n).is_leaf(),
                doi: doi[n],
                dots: dot_plot_data(model, n, kind, stats)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerView {
        statistic: kind,
        visible,
        segments,
    })
}

/// Initial layer-level view: treecut by DOI, then segmentation.
pub fn layer_view(model: &ModelGraph, kind: StatisticKind, stats: &[LayerStatistic], opts: &LayerViewOptions) -> Result<LayerView> {
    let h = model.hierarchy();
    let doi = doi_from_layers(h, &layer_doi(model, stats));
    let cut = treecut(h, &doi, opts.budget)?;
    layer_view_for(model, &cut.visible, kind, stats, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{ModelBuilder, Shape};

    fn model() -> ModelGraph {
        let mut b = ModelBuilder::new("input", Shape::new(1, 4, 4));
        b.group(&["blk"]);
        b.conv("c1", "input", 2, 3, 1, 1);
        b.relu("r1", "c1");
        b.conv("c2", "r1", 2, 3, 1, 1);
        b.group(&[]);
        b.global_avg_pool("gap", "c2");
        b.dense("fc", "gap", 2);
        b.softmax("prob", "fc");
        b.build().unwrap()
    }

    fn stat(layer: &str, kind: StatisticKind, value: f64) -> LayerStatistic {
        LayerStatistic {
            layer: layer.into(),
            kind,
            value,
            fallback: false,
        }
    }

    #[test]
    fn topological_dots_map_identity() {
        let m = model();
        let kind = StatisticKind::TopologicalSimilarity;
        let stats = vec![stat("c1", kind, 1.0), stat("r1", kind, 0.5), stat("c2", kind, 0.0)];
        let blk = m.hierarchy().find("blk").unwrap();
        let xs: Vec<f64> = dot_plot_data(&m, blk, kind, &stats).unwrap().iter().map(|d| d.x).collect();
        assert_eq!(xs, [1.0, 0.5, 0.0]);
    }

    #[test]
    fn cosine_minus_one_maps_to_zero() {
        let m = model();
        let kind = StatisticKind::ActivationSimilarity;
        let leaf = m.hierarchy().find("blk/c1").unwrap();
        let dots = dot_plot_data(&m, leaf, kind, &[stat("c1", kind, -1.0)]).unwrap();
        assert_eq!(dots, vec![Dot { layer: "c1".into(), x: 0.0 }]);
    }

    #[test]
    fn missing_statistic_is_an_error() {
        let m = model();
        let blk = m.hierarchy().find("blk").unwrap();
        let kind = StatisticKind::TopologicalSimilarity;
        assert!(dot_plot_data(&m, blk, kind, &[stat("c1", kind, 1.0)]).is_err());
    }

    #[test]
    fn layer_view_covers_every_layer() {
        let m = model();
        let kind = StatisticKind::ActivationSimilarity;
        let stats: Vec<_> = m.nodes().iter().map(|n| stat(&n.id, kind, 0.9)).collect();
        let view = layer_view(&m, kind, &stats, &LayerViewOptions::default()).unwrap();
        let dots: usize = view.visible.iter().map(|v| v.dots.len()).sum();
        assert_eq!(dots, m.len());
        let placed: Vec<usize> = view.segments.rows.iter().flatten().map(|p| p.node).collect();
        let order: Vec<usize> = view.visible.iter().map(|v| v.node).collect();
        assert_eq!(placed, order);
    }
}
