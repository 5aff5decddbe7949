use serde::Serialize;

use crate::error::{Error, Result};
use crate::nnet::Hierarchy;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreecutResult {
    /// Visible hierarchy nodes in hierarchy order.
    pub visible: Vec<usize>,
    /// DOI of each visible node, aligned with `visible`.
    pub doi: Vec<f64>,
    pub budget: usize,
}

/// DOI of every hierarchy node as the maximum over the layers it contains.
pub fn doi_from_layers(hierarchy: &Hierarchy, layer_doi: &[f64]) -> Vec<f64> {
    (0..hierarchy.len())
        .map(|n| {
            hierarchy
                .layers_under(n)
                .into_iter()
                .map(|l| layer_doi[l])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .map(|v| if v.is_finite() { v } else { 0.0 })
        .collect()
}

fn rank(hierarchy: &Hierarchy) -> Vec<usize> {
    let mut rank = vec![0; hierarchy.len()];
    for (r, n) in hierarchy.preorder().into_iter().enumerate() {
        rank[n] = r;
    }
    rank
}

/// Greedy treecut: start from the root's children and keep expanding the
/// visible group with the highest DOI whose expansion stays within `budget`.
/// Ties go to the node that comes first in hierarchy order.
pub fn treecut(hierarchy: &Hierarchy, doi: &[f64], budget: usize) -> Result<TreecutResult> {
    if doi.len() != hierarchy.len() {
        return Err(Error::InvalidArgument(format!(
            "{} DOI values for {} hierarchy nodes",
            doi.len(),
            hierarchy.len()
        )));
    }
    let root = hierarchy.node(Hierarchy::ROOT);
    if budget < root.children.len() {
        return Err(Error::InvalidArgument(format!(
            "budget {budget} is smaller than the root fan-out {}",
            root.children.len()
        )));
    }
    let rank = rank(hierarchy);
    let mut visible = root.children.clone();
    loop {
        let best = visible
            .iter()
            .enumerate()
            .filter(|(_, &n)| {
                let kids = hierarchy.node(n).children.len();
                kids > 0 && visible.len() - 1 + kids <= budget
            })
            .max_by(|(_, &a), (_, &b)| doi[a].total_cmp(&doi[b]).then(rank[b].cmp(&rank[a])))
            .map(|(pos, _)| pos);
        let Some(pos) = best else { break };
        let node = visible[pos];
        visible.splice(pos..=pos, hierarchy.node(node).children.iter().copied());
    }
    Ok(TreecutResult {
        doi: visible.iter().map(|&n| doi[n]).collect(),
        visible,
        budget,
    })
}

/// Replaces a visible group by its children; leaves and hidden nodes are a no-op.
pub fn expand(hierarchy: &Hierarchy, visible: &[usize], node: usize) -> Vec<usize> {
    let mut out = visible.to_vec();
    if let Some(pos) = out.iter().position(|&n| n == node) {
        let kids = &hierarchy.node(node).children;
        if !kids.is_empty() {
            out.splice(pos..=pos, kids.iter().copied());
        }
    }
    out
}

/// Replaces every visible descendant of `node` by `node` itself.
pub fn collapse(hierarchy: &Hierarchy, visible: &[usize], node: usize) -> Vec<usize> {
    if node == Hierarchy::ROOT || visible.contains(&node) {
        return visible.to_vec();
    }
    let mut out = Vec::with_capacity(visible.len());
    let mut placed = false;
    for &n in visible {
        if hierarchy.is_ancestor_or_self(node, n) {
            if !placed {
                out.push(node);
                placed = true;
            }
        } else {
            out.push(n);
        }
    }
    out
}

/// Whether `visible` is an antichain covering every leaf exactly once.
pub fn is_valid_cut(hierarchy: &Hierarchy, visible: &[usize]) -> bool {
    hierarchy.nodes().iter().enumerate().filter(|(_, n)| n.is_leaf()).all(|(leaf, _)| {
        visible
            .iter()
            .filter(|&&v| hierarchy.is_ancestor_or_self(v, leaf))
            .count()
            == 1
    })
}
