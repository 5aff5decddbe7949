use serde::Serialize;

use crate::error::{Error, Result};
use crate::nnet::Hierarchy;

/// A break splits a building block when the nodes on either side share a
/// non-root lowest common ancestor.
pub fn cuts_block(hierarchy: &Hierarchy, left: usize, right: usize) -> bool {
    hierarchy.lowest_common_ancestor(left, right) != Hierarchy::ROOT
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlacedNode {
    pub node: usize,
    pub x: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BreakCost {
    /// Trailing empty space of the segment ending at this break.
    pub empty: f64,
    /// Whether the break splits a building block.
    pub cuts_block: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentedLayout {
    pub rows: Vec<Vec<PlacedNode>>,
    pub breaks: Vec<BreakCost>,
    pub line_width: f64,
    pub lambda: f64,
    pub cost: f64,
}

/// Optimal segmentation of a sequence into rows of width at most `line_width`.
///
/// `cuts[i]` says whether breaking between item `i` and `i + 1` splits a
/// block. Minimizes `Σ (e_i + lambda · c_i)` over every segment but the last.
/// Returns the cost and the exclusive end index of every segment.
pub fn optimal_breaks(widths: &[f64], cuts: &[bool], line_width: f64, lambda: f64) -> Result<(f64, Vec<usize>)> {
    let m = widths.len();
    if m > 0 && cuts.len() + 1 != m {
        return Err(Error::InvalidArgument(format!(
            "{} cut flags for {m} items",
            cuts.len()
        )));
    }
    if let Some((i, w)) = widths
        .iter()
        .enumerate()
        .find(|(_, w)| !(w.is_finite() && **w >= 0.0 && **w <= line_width))
    {
        return Err(Error::InvalidArgument(format!(
            "item {i} has width {w}, line width is {line_width}"
        )));
    }
    if m == 0 {
        return Ok((0.0, Vec::new()));
    }
    // best[j]: cheapest layout of items [0, j) ending with a non-final break at j
    let mut best = vec![f64::INFINITY; m + 1];
    let mut prev = vec![0usize; m + 1];
    best[0] = 0.0;
    let mut answer = (f64::INFINITY, 0usize);
    for i in 0..m {
        if !best[i].is_finite() {
            continue;
        }
        let mut used = 0.0;
        for j in i..m {
            used += widths[j];
            if used > line_width {
                break;
            }
            if j + 1 == m {
                if best[i] < answer.0 {
                    answer = (best[i], i);
                }
            } else {
                let c = best[i] + ((line_width - used) + if cuts[j] { lambda } else { 0.0 });
                if c < best[j + 1] {
                    best[j + 1] = c;
                    prev[j + 1] = i;
                }
            }
        }
    }
    let mut ends = vec![m];
    let mut at = answer.1;
    while at > 0 {
        ends.push(at);
        at = prev[at];
    }
    ends.reverse();
    Ok((answer.0, ends))
}

/// Segments visible hierarchy nodes (in topological order) into rows.
pub fn segment_dag(
    hierarchy: &Hierarchy,
    nodes: &[(usize, f64)],
    line_width: f64,
    lambda: f64,
) -> Result<SegmentedLayout> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    let widths: Vec<f64> = nodes.iter().map(|n| n.1).collect();
    let cuts: Vec<bool> = nodes.windows(2).map(|w| cuts_block(hierarchy, w[0].0, w[1].0)).collect();
    let (cost, ends) = optimal_breaks(&widths, &cuts, line_width, lambda)?;

    let mut rows = Vec::with_capacity(ends.len());
    let mut breaks = Vec::new();
    let mut start = 0;
    for (r, &end) in ends.iter().enumerate() {
        let mut x = 0.0;
        let row: Vec<PlacedNode> = nodes[start..end]
            .iter()
            .map(|&(node, width)| {
                let p = PlacedNode { node, x, width };
                x += width;
                p
            })
            .collect();
        if r + 1 < ends.len() {
            breaks.push(BreakCost {
                empty: line_width - x,
                cuts_block: cuts[end - 1],
            });
        }
        rows.push(row);
        start = end;
    }
    Ok(SegmentedLayout {
        rows,
        breaks,
        line_width,
        lambda,
        cost,
    })
}
