mod common;

use common::{random_example, random_net, rng};
use datapath_core::neuronview::{
    activation_heatmap, dataset_mean, discrepancy_map, normalize_grid, DiscrepancyTarget,
};
use datapath_core::nnet::{Example, LayerParams, ModelBuilder, ModelGraph, Shape, Tensor};
use rand::Rng;

const SIDE: usize = 16;
const KERNEL: [f64; 9] = [-1.0, -1.0, -1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0];

fn edge_net() -> ModelGraph {
    let mut b = ModelBuilder::new("input", Shape::new(1, SIDE, SIDE));
    b.conv("edge", "input", 1, 3, 1, 1);
    b.relu("edge_relu", "edge");
    b.global_avg_pool("gap", "edge_relu");
    b.dense("fc", "gap", 2);
    b.softmax("prob", "fc");
    let mut m = b.build().unwrap();
    m.set_params(
        "edge",
        LayerParams {
            weight: KERNEL.to_vec(),
            bias: vec![0.0],
        },
    )
    .unwrap();
    m
}

/// Mean relu edge response, computed directly.
fn edge_mean(px: &[f64]) -> f64 {
    let at = |y: i64, x: i64| {
        if (0..SIDE as i64).contains(&y) && (0..SIDE as i64).contains(&x) {
            px[y as usize * SIDE + x as usize]
        } else {
            0.0
        }
    };
    let mut total = 0.0;
    for y in 0..SIDE as i64 {
        for x in 0..SIDE as i64 {
            let mut s = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    s += KERNEL[(dy * 3 + dx) as usize] * at(y + dy - 1, x + dx - 1);
                }
            }
            total += s.max(0.0);
        }
    }
    total / (SIDE * SIDE) as f64
}

#[test]
fn matches_scripted_occlusion_loop() {
    let m = edge_net();
    let mut r = rng(5);
    let mut px = vec![0.0; SIDE * SIDE];
    for y in 6..10 {
        for x in 0..SIDE {
            px[y * SIDE + x] = 0.8 + r.random_range(0.0..0.2);
        }
    }
    let example = Example::new(Tensor::from_vec(Shape::new(1, SIDE, SIDE), px.clone()).unwrap(), 0, "normal");
    let fill = 0.3;
    let target = DiscrepancyTarget {
        layer: "edge_relu".into(),
        feature_map: 0,
        neuron: None,
    };
    let map = discrepancy_map(&m, &example, 0, &target, 4, 0.5, &[fill]).unwrap();
    let base = edge_mean(&px);
    let mut deltas = Vec::new();
    for py in 0..4 {
        for px_ in 0..4 {
            let mut occ = px.clone();
            for y in py * 4..py * 4 + 4 {
                for x in px_ * 4..px_ * 4 + 4 {
                    occ[y * SIDE + x] = fill;
                }
            }
            deltas.push((edge_mean(&occ) - base).abs());
        }
    }
    let max = deltas.iter().cloned().fold(0.0, f64::max);
    let expected: Vec<bool> = deltas.iter().map(|&d| d > 0.0 && d >= 0.5 * max).collect();
    for (a, b) in map.delta.iter().zip(&deltas) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(map.important, expected);
    assert_eq!((map.rows, map.cols), (4, 4));
}

#[test]
fn patches_outside_receptive_field_do_nothing() {
    for seed in 0..5 {
        let m = random_net(seed);
        let e = random_example(&m, seed);
        let side = m.input_shape().height;
        let (ny, nx) = (1, 1);
        let target = DiscrepancyTarget {
            layer: "r1".into(),
            feature_map: 0,
            neuron: Some((ny, nx)),
        };
        let map = discrepancy_map(&m, &e, 0, &target, 2, 0.5, &vec![0.5; m.input_shape().channels]).unwrap();
        for r in 0..map.rows {
            for c in 0..map.cols {
                // rows/cols 0..=2 hold the 3×3 field of neuron (1, 1)
                let outside = r * 2 > ny + 1 || c * 2 > nx + 1;
                if outside {
                    assert_eq!(map.delta[r * map.cols + c], 0.0);
                    assert!(!map.is_important(r, c));
                }
            }
        }
        assert_eq!(map.preview.len(), side * side);
    }
}

#[test]
fn own_content_fill_and_monotone_threshold() {
    let m = edge_net();
    let flat = Example::new(Tensor::from_vec(Shape::new(1, SIDE, SIDE), vec![0.4; SIDE * SIDE]).unwrap(), 0, "n");
    let target = DiscrepancyTarget {
        layer: "edge_relu".into(),
        feature_map: 0,
        neuron: None,
    };
    let map = discrepancy_map(&m, &flat, 0, &target, 4, 0.5, &[0.4]).unwrap();
    assert!(map.delta.iter().all(|&d| d == 0.0));
    assert!(map.degenerate && map.important.iter().all(|&b| !b));

    let e = random_example(&m, 3);
    let mut prev = usize::MAX;
    for theta in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let map = discrepancy_map(&m, &e, 0, &target, 4, theta, &dataset_mean(&[e.clone()]).unwrap()).unwrap();
        let count = map.important.iter().filter(|&&b| b).count();
        assert!(count <= prev);
        if theta == 1.0 {
            let max = map.delta.iter().cloned().fold(0.0, f64::max);
            for (d, i) in map.delta.iter().zip(&map.important) {
                assert_eq!(*i, *d == max);
            }
        }
        prev = count;
    }
}

#[test]
fn heatmap_normalization() {
    let m = random_net(2);
    let t = m.forward(&random_example(&m, 1), None).unwrap();
    let hm = activation_heatmap(&m, &t, "c1", 0).unwrap();
    assert!(hm.grid.iter().all(|v| (-1.0..=1.0).contains(v)));
    if hm.scale > 0.0 {
        assert_eq!(hm.grid.iter().fold(0.0f64, |a, v| a.max(v.abs())), 1.0);
    }
    assert_eq!(normalize_grid(&hm.grid).0, hm.grid);
    assert!(activation_heatmap(&m, &t, "c1", 99).is_err());
}
