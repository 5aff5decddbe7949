use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans, DEFAULT_ITERATIONS, DEFAULT_MAX_K, DEFAULT_SEED};
use crate::error::{Error, Result};
use crate::extraction::Datapath;
use crate::nnet::{ActivationTrace, ModelGraph};

pub const MAX_COMPARED: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Rect { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Containment with a small absolute slack for accumulated rounding.
    pub fn contains(&self, other: &Rect) -> bool {
        const EPS: f64 = 1e-9;
        other.x >= self.x - EPS
            && other.y >= self.y - EPS
            && other.x + other.w <= self.x + self.w + EPS
            && other.y + other.h <= self.y + self.h + EPS
    }

    pub fn interiors_overlap(&self, other: &Rect) -> bool {
        const EPS: f64 = 1e-9;
        let ox = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let oy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        ox > EPS && oy > EPS
    }

    /// Splits into consecutive slices with areas proportional to `weights`,
    /// along x when `horizontal`, along y otherwise.
    pub fn slice(&self, weights: &[f64], horizontal: bool) -> Vec<Rect> {
        let total: f64 = weights.iter().sum();
        let mut offset = 0.0;
        weights
            .iter()
            .map(|w| {
                let frac = if total > 0.0 { w / total } else { 1.0 / weights.len() as f64 };
                let r = if horizontal {
                    Rect::new(self.x + offset * self.w, self.y, frac * self.w, self.h)
                } else {
                    Rect::new(self.x, self.y + offset * self.h, self.w, frac * self.h)
                };
                offset += frac;
                r
            })
            .collect()
    }
}

/// Feature maps sharing one membership signature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EulerCell {
    /// Indices of the datapaths whose critical set contains the members.
    pub signature: Vec<usize>,
    pub members: Vec<usize>,
}

/// Splits the union of 1–4 critical sets by membership signature. Cells are
/// ordered by signature.
pub fn euler_cells(critical_sets: &[&[usize]]) -> Result<Vec<EulerCell>> {
    if critical_sets.is_empty() || critical_sets.len() > MAX_COMPARED {
        return Err(Error::InvalidArgument(format!(
            "euler cells compare 1 to {MAX_COMPARED} datapaths, got {}",
            critical_sets.len()
        )));
    }
    let mut membership: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (d, set) in critical_sets.iter().enumerate() {
        for &j in set.iter() {
            let sig = membership.entry(j).or_default();
            if !sig.contains(&d) {
                sig.push(d);
            }
        }
    }
    let mut cells: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for (j, sig) in membership {
        cells.entry(sig).or_default().push(j);
    }
    Ok(cells
        .into_iter()
        .map(|(signature, members)| EulerCell { signature, members })
        .collect())
}

pub fn euler_cells_for_layer(datapaths: &[&Datapath], layer: &str) -> Result<Vec<EulerCell>> {
    let sets = datapaths
        .iter()
        .map(|d| d.critical(layer).ok_or_else(|| Error::UnknownLayer(layer.to_string())))
        .collect::<Result<Vec<_>>>()?;
    euler_cells(&sets)
}

/// Number of stacked rectangles for a cluster of `size` feature maps:
/// `floor(log10(size)) + 1`, i.e. its decimal digit count.
pub fn glyph_count(size: usize) -> usize {
    let mut n = size.max(1);
    let mut digits = 0;
    while n > 0 {
        digits += 1;
        n /= 10;
    }
    digits
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellBoxes {
    pub rect: Rect,
    pub clusters: Vec<Rect>,
}

/// Slice-and-dice treemap: cells split the canvas along its longer side in
/// proportion to their member counts, clusters split each cell the other way.
pub fn treemap_layout(cluster_sizes: &[Vec<usize>], canvas: Rect) -> Result<Vec<CellBoxes>> {
    if !(canvas.w > 0.0 && canvas.h > 0.0 && canvas.area().is_finite()) {
        return Err(Error::InvalidArgument("canvas has zero area".into()));
    }
    if cluster_sizes.is_empty() || cluster_sizes.iter().any(|c| c.is_empty() || c.contains(&0)) {
        return Err(Error::InvalidArgument("treemap needs nonempty cells and clusters".into()));
    }
    let horizontal = canvas.w >= canvas.h;
    let cell_weights: Vec<f64> = cluster_sizes.iter().map(|c| c.iter().sum::<usize>() as f64).collect();
    Ok(canvas
        .slice(&cell_weights, horizontal)
        .into_iter()
        .zip(cluster_sizes)
        .map(|(rect, sizes)| {
            let w: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
            CellBoxes {
                rect,
                clusters: rect.slice(&w, !horizontal),
            }
        })
        .collect())
}

/// One compared group at the focused layer.
#[derive(Debug, Clone, Copy)]
pub struct EulerGroup<'a> {
    pub name: &'a str,
    pub datapath: &'a Datapath,
    pub traces: &'a [ActivationTrace],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EulerOptions {
    /// Clusters per cell; `None` uses `min(5, members)`.
    pub k: Option<usize>,
    pub iterations: usize,
    pub seed: u64,
    pub canvas: Rect,
    /// `(normal, adversarial)` group indices for the activation-difference encoding.
    pub difference: Option<(usize, usize)>,
}

impl Default for EulerOptions {
    fn default() -> Self {
        EulerOptions {
            k: None,
            iterations: DEFAULT_ITERATIONS,
            seed: DEFAULT_SEED,
            canvas: Rect::new(0.0, 0.0, 100.0, 60.0),
            difference: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterView {
    pub members: Vec<usize>,
    pub size: usize,
    pub glyphs: usize,
    pub mean_importance: f64,
    pub mean_activation: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub activation_difference: Option<f64>,
    pub rect: Rect,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellView {
    pub signature: Vec<usize>,
    pub signature_names: Vec<String>,
    pub members: Vec<usize>,
    pub rect: Rect,
    pub clusters: Vec<ClusterView>,
    /// Set when the requested `k` exceeded the member count.
    pub k_clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EulerLayout {
    pub layer: String,
    pub groups: Vec<String>,
    pub canvas: Rect,
    pub cells: Vec<CellView>,
}

fn channel_mean(trace: &ActivationTrace, layer: usize, j: usize) -> f64 {
    let ch = trace.activations[layer].channel(j);
    ch.iter().sum::<f64>() / ch.len() as f64
}

/// Per-member feature vectors: per-example mean activations, concatenated
/// across the groups.
pub fn feature_vectors(layer: usize, groups: &[&[ActivationTrace]], members: &[usize]) -> Vec<Vec<f64>> {
    members
        .iter()
        .map(|&j| {
            groups
                .iter()
                .flat_map(|traces| traces.iter().map(move |t| channel_mean(t, layer, j)))
                .collect()
        })
        .collect()
}

/// Euler cells, per-cell clusters and treemap rectangles for one layer.
pub fn euler_layout(model: &ModelGraph, layer: &str, groups: &[EulerGroup<'_>], opts: &EulerOptions) -> Result<EulerLayout> {
    let idx = model.layer_index(layer)?;
    let dps: Vec<&Datapath> = groups.iter().map(|g| g.datapath).collect();
    let cells = euler_cells_for_layer(&dps, layer)?;
    for g in groups {
        if g.traces.is_empty() {
            return Err(Error::InvalidArgument(format!("group `{}` has no traces", g.name)));
        }
        for t in g.traces {
            model.check_trace(t)?;
        }
    }
    if let Some((a, b)) = opts.difference {
        if a >= groups.len() || b >= groups.len() {
            return Err(Error::OutOfRange {
                index: a.max(b),
                len: groups.len(),
            });
        }
    }
    let trace_groups: Vec<&[ActivationTrace]> = groups.iter().map(|g| g.traces).collect();

    let mut views = Vec::with_capacity(cells.len());
    for cell in &cells {
        let k = opts.k.unwrap_or(DEFAULT_MAX_K.min(cell.members.len()));
        let feats = feature_vectors(idx, &trace_groups, &cell.members);
        let clustering = kmeans(&cell.members, &feats, k, opts.iterations, opts.seed)?;
        let clusters = clustering
            .clusters
            .iter()
            .map(|c| {
                let size = c.members.len();
                let importance: f64 = c
                    .members
                    .iter()
                    .map(|&j| {
                        cell.signature
                            .iter()
                            .map(|&d| groups[d].datapath.layer(layer).expect("checked").importance[j])
                            .sum::<f64>()
                            / cell.signature.len() as f64
                    })
                    .sum::<f64>()
                    / size as f64;
                let activation: f64 = c
                    .members
                    .iter()
                    .map(|&j| {
                        let all: Vec<f64> = trace_groups
                            .iter()
                            .flat_map(|ts| ts.iter().map(|t| channel_mean(t, idx, j)))
                            .collect();
                        all.iter().sum::<f64>() / all.len() as f64
                    })
                    .sum::<f64>()
                    / size as f64;
                let difference = opts.difference.map(|(n, a)| {
                    c.members
                        .iter()
                        .map(|&j| {
                            let total = |ts: &[ActivationTrace]| {
                                ts.iter().map(|t| t.activations[idx].channel(j).iter().sum::<f64>()).sum::<f64>()
                                    / ts.len() as f64
                            };
                            total(groups[n].traces) - total(groups[a].traces)
                        })
                        .sum::<f64>()
                        / size as f64
                });
                ClusterView {
                    members: c.members.clone(),
                    size,
                    glyphs: glyph_count(size),
                    mean_importance: importance,
                    mean_activation: activation,
                    activation_difference: difference,
                    rect: opts.canvas,
                }
            })
            .collect();
        views.push(CellView {
            signature: cell.signature.clone(),
            signature_names: cell.signature.iter().map(|&d| groups[d].name.to_string()).collect(),
            members: cell.members.clone(),
            rect: opts.canvas,
            clusters,
            k_clamped: clustering.clamped,
        });
    }

    if !views.is_empty() {
        let sizes: Vec<Vec<usize>> = views.iter().map(|v| v.clusters.iter().map(|c| c.size).collect()).collect();
        for (view, boxes) in views.iter_mut().zip(treemap_layout(&sizes, opts.canvas)?) {
            view.rect = boxes.rect;
            for (c, r) in view.clusters.iter_mut().zip(boxes.clusters) {
                c.rect = r;
            }
        }
    }
    Ok(EulerLayout {
        layer: layer.to_string(),
        groups: groups.iter().map(|g| g.name.to_string()).collect(),
        canvas: opts.canvas,
        cells: views,
    })
}
