//! The shipped desk-scale model and its procedurally generated dataset.
//!
//! Two classes of 16×16 grayscale motifs (plus signs and hollow squares over
//! faint noise) train a small residual CNN. Everything is seeded, and the
//! training loop reduces per-example gradients in a fixed order, so the same
//! seed always yields bit-identical weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{Example, ExampleSet, LayerKind, LayerParams, ModelBuilder, ModelGraph, Shape, Tensor};

pub const SIDE: usize = 16;
pub const CLASS_NAMES: [&str; 2] = ["plus", "square"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureConfig {
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            seed: 1,
            train_size: 640,
            test_size: 50,
            epochs: 8,
            batch_size: 16,
            learning_rate: 0.02,
            momentum: 0.9,
        }
    }
}

fn draw_motif(rng: &mut ChaCha8Rng, class: usize) -> Vec<f64> {
    let mut px: Vec<f64> = (0..SIDE * SIDE).map(|_| rng.random_range(0.0..0.15)).collect();
    let ink = rng.random_range(0.7..1.0);
    let arm = rng.random_range(2..=4) as i64;
    let cy = rng.random_range(arm..SIDE as i64 - arm);
    let cx = rng.random_range(arm..SIDE as i64 - arm);
    let mut set = |y: i64, x: i64| {
        if (0..SIDE as i64).contains(&y) && (0..SIDE as i64).contains(&x) {
            let p = &mut px[y as usize * SIDE + x as usize];
            *p = p.max(ink);
        }
    };
    match class {
        0 => {
            for d in -arm..=arm {
                set(cy, cx + d);
                set(cy + d, cx);
            }
        }
        _ => {
            for d in -arm..=arm {
                set(cy - arm, cx + d);
                set(cy + arm, cx + d);
                set(cy + d, cx - arm);
                set(cy + d, cx + arm);
            }
        }
    }
    px
}

/// `count` examples with alternating labels.
pub fn generate_dataset(count: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let class = i % 2;
            let px = draw_motif(&mut rng, class);
            let t = Tensor::from_vec(Shape::new(1, SIDE, SIDE), px).expect("motif shape");
            Example::new(t, class, "normal")
        })
        .collect()
}

/// Residual CNN with zero weights: stem, two residual stages and a dense head.
pub fn residual_model() -> ModelGraph {
    let mut b = ModelBuilder::new("input", Shape::new(1, SIDE, SIDE));
    b.group(&["stem"]);
    b.conv("stem_conv", "input", 8, 3, 1, 1);
    b.relu("stem_relu", "stem_conv");
    b.group(&["stage1", "block1"]);
    b.conv("s1_conv1", "stem_relu", 8, 3, 1, 1);
    b.relu("s1_relu1", "s1_conv1");
    b.conv("s1_conv2", "s1_relu1", 8, 3, 1, 1);
    b.add("s1_add", "s1_conv2", "stem_relu");
    b.relu("s1_out", "s1_add");
    b.group(&["stage1"]);
    b.max_pool("s1_pool", "s1_out", 2, 2);
    b.group(&["stage2", "transition"]);
    b.conv("s2_conv0", "s1_pool", 16, 3, 1, 1);
    b.relu("s2_relu0", "s2_conv0");
    b.group(&["stage2", "block2"]);
    b.conv("s2_conv1", "s2_relu0", 16, 3, 1, 1);
    b.relu("s2_relu1", "s2_conv1");
    b.conv("s2_conv2", "s2_relu1", 16, 3, 1, 1);
    b.add("s2_add", "s2_conv2", "s2_relu0");
    b.relu("s2_out", "s2_add");
    b.group(&["head"]);
    b.global_avg_pool("gap", "s2_out");
    b.dense("fc1", "gap", 16);
    b.relu("fc1_relu", "fc1");
    b.dense("fc", "fc1_relu", 2);
    b.softmax("prob", "fc");
    b.build().expect("fixture architecture is valid")
}

fn fan_in(model: &ModelGraph, idx: usize) -> usize {
    let node = model.node(idx);
    let Some(&src) = model.inputs_of(idx).first() else {
        return 1;
    };
    let input = model.node(src);
    match node.kind {
        LayerKind::Conv { kernel, .. } => input.channels * kernel * kernel,
        _ => input.channels * input.height * input.width,
    }
}

/// He-normal weights and zero biases. Second convolutions of residual
/// branches are scaled down so each block starts near the identity.
pub fn init_weights(model: &mut ModelGraph, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std: Vec<f64> = (0..model.len())
        .map(|i| {
            let base = (2.0 / fan_in(model, i).max(1) as f64).sqrt();
            let feeds_add = model
                .consumers_of(i)
                .iter()
                .any(|&c| matches!(model.node(c).kind, LayerKind::Add) && model.inputs_of(c)[0] == i);
            if feeds_add {
                base * 0.5
            } else {
                base
            }
        })
        .collect();
    model.update_params(|i, p| {
        let normal = Normal::new(0.0, std[i]).expect("finite std");
        for w in &mut p.weight {
            *w = normal.sample(&mut rng);
        }
        p.bias.iter_mut().for_each(|b| *b = 0.0);
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub train_error: f64,
}

fn zero_grads(model: &ModelGraph) -> Vec<Option<LayerParams>> {
    model
        .all_params()
        .iter()
        .map(|p| p.as_ref().map(|p| LayerParams::zeros(p.weight.len(), p.bias.len())))
        .collect()
}

fn accumulate(into: &mut [Option<LayerParams>], from: &[Option<LayerParams>]) {
    for (a, b) in into.iter_mut().zip(from) {
        if let (Some(a), Some(b)) = (a, b) {
            a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }
}

/// Minibatch SGD with momentum on the cross-entropy loss.
pub fn train(model: &mut ModelGraph, data: &[Example], cfg: &FixtureConfig) -> Result<TrainReport> {
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("training needs data and a positive batch size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut velocity = zero_grads(model);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        // Fisher–Yates with the seeded stream
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let per_example = batch
                .par_iter()
                .map(|&i| {
                    let mut g = zero_grads(model);
                    let loss = model.loss_and_param_grads(&data[i], data[i].label, &mut g)?;
                    Ok((loss, g))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads = zero_grads(model);
            for (loss, g) in &per_example {
                total += loss;
                accumulate(&mut grads, g);
            }
            let scale = cfg.learning_rate / batch.len() as f64;
            model.update_params(|i, p| {
                let (Some(v), Some(g)) = (velocity[i].as_mut(), grads[i].as_ref()) else {
                    return;
                };
                for ((w, vw), gw) in p.weight.iter_mut().zip(&mut v.weight).zip(&g.weight) {
                    *vw = cfg.momentum * *vw - scale * gw;
                    *w += *vw;
                }
                for ((b, vb), gb) in p.bias.iter_mut().zip(&mut v.bias).zip(&g.bias) {
                    *vb = cfg.momentum * *vb - scale * gb;
                    *b += *vb;
                }
            })?;
        }
        epoch_loss.push(total / data.len() as f64);
    }
    Ok(TrainReport {
        epoch_loss,
        train_error: crate::attacks::error_rate(model, data)?,
    })
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub model: ModelGraph,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub report: TrainReport,
}

/// Builds, initializes and trains the shipped model.
pub fn build_fixture(cfg: &FixtureConfig) -> Result<Fixture> {
    let train_set = generate_dataset(cfg.train_size, cfg.seed);
    let test = generate_dataset(cfg.test_size, cfg.seed.wrapping_add(1_000_003));
    let mut model = residual_model();
    init_weights(&mut model, cfg.seed.wrapping_add(17))?;
    let report = train(&mut model, &train_set, cfg)?;
    Ok(Fixture {
        model,
        train: train_set,
        test,
        report,
    })
}

/// A layer where the most active feature map is dead to the classifier.
#[derive(Debug, Clone)]
pub struct DistractorFixture {
    pub model: ModelGraph,
    pub examples: ExampleSet,
    pub layer: String,
    /// Strongly activated map whose downstream weights are equal for both classes.
    pub distractor: usize,
    /// Weakly activated map that alone separates the classes.
    pub driver: usize,
}

/// Input 1×4×4 → 1×1 conv to three maps → relu → mean pool → dense → softmax.
/// Map 1 has by far the largest activation but identical weights into both
/// logits, so it never changes the class probability; map 0 drives class 0.
pub fn distractor_fixture(seed: u64) -> Result<DistractorFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = ModelBuilder::new("input", Shape::new(1, 4, 4));
    b.group(&["features"]);
    b.conv("conv", "input", 3, 1, 1, 0);
    b.relu("relu", "conv");
    b.group(&["head"]);
    b.global_avg_pool("gap", "relu");
    b.dense("fc", "gap", 2);
    b.softmax("prob", "fc");
    let mut model = b.build()?;

    let drive = rng.random_range(1.5..2.5);
    let loud = rng.random_range(4.0..6.0);
    let quiet = rng.random_range(0.2..0.5);
    let shared = rng.random_range(0.3..1.0);
    let minor = rng.random_range(-0.1..0.1);
    model.set_params(
        "conv",
        LayerParams {
            weight: vec![1.0, loud, quiet],
            bias: vec![0.0; 3],
        },
    )?;
    // logit gap ≈ drive · mean(map 0) − drive/2 keeps p near 1/2
    model.set_params(
        "fc",
        LayerParams {
            weight: vec![drive, shared, minor, 0.0, shared, 0.0],
            bias: vec![-drive / 2.0, 0.0],
        },
    )?;
    let examples = (0..8)
        .map(|_| {
            let px = (0..16).map(|_| rng.random_range(0.3..0.7)).collect();
            Example::new(Tensor::from_vec(Shape::new(1, 4, 4), px).expect("shape"), 0, "normal")
        })
        .collect();
    Ok(DistractorFixture {
        model,
        examples: ExampleSet::new("distractor", examples),
        layer: "relu".into(),
        distractor: 1,
        driver: 0,
    })
}
