use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_MAX_K: usize = 5;
pub const DEFAULT_ITERATIONS: usize = 50;
pub const DEFAULT_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cluster {
    /// Member ids, ascending.
    pub members: Vec<usize>,
    pub centroid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Clustering {
    pub clusters: Vec<Cluster>,
    /// Number of clusters actually used.
    pub k: usize,
    /// Set when `k` exceeded the member count and was reduced.
    pub clamped: bool,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, center) in centers.iter().enumerate() {
        let d = dist2(p, center);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Lloyd's k-means with seeded farthest-point initialization.
///
/// `ids[i]` labels the point `points[i]`. The first center is drawn from a
/// ChaCha stream seeded with `seed`; each further center is the point farthest
/// from the chosen ones (lowest index on ties). Seeding stops early when every
/// remaining point coincides with a center, so duplicate points never yield
/// empty clusters.
pub fn kmeans(ids: &[usize], points: &[Vec<f64>], k: usize, iterations: usize, seed: u64) -> Result<Clustering> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if ids.len() != points.len() {
        return Err(Error::InvalidArgument("ids and points differ in length".into()));
    }
    if points.is_empty() {
        return Ok(Clustering {
            clusters: Vec::new(),
            k: 0,
            clamped: k > 0,
        });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidArgument("points must share a dimension and be finite".into()));
    }
    let clamped = k > points.len();
    let k = k.min(points.len());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..points.len());
    let mut centers = vec![points[first].clone()];
    let mut min_d: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let (far, &d) = min_d
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("nonempty");
        if d == 0.0 {
            break;
        }
        centers.push(points[far].clone());
        for (m, p) in min_d.iter_mut().zip(points) {
            *m = m.min(dist2(p, &points[far]));
        }
    }

    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    for _ in 0..iterations {
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for (c, (s, &n)) in centers.iter_mut().zip(sums.iter().zip(&counts)) {
            if n > 0 {
                *c = s.iter().map(|v| v / n as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }

    let mut clusters: Vec<Cluster> = centers
        .into_iter()
        .enumerate()
        .map(|(c, centroid)| Cluster {
            members: ids
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == c)
                .map(|(&id, _)| id)
                .collect(),
            centroid,
        })
        .filter(|c| !c.members.is_empty())
        .collect();
    for c in &mut clusters {
        c.members.sort_unstable();
    }
    clusters.sort_by_key(|c| c.members[0]);
    Ok(Clustering {
        k: clusters.len(),
        clusters,
        clamped,
    })
}
