//! Fast gradient sign adversarial examples.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::ADVERSARIAL_TAG;
use crate::nnet::{Example, ModelGraph};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// L∞ budget.
    pub epsilon: f64,
    /// Targeted class; `None` ascends the loss of the true label.
    #[serde(default)]
    pub target: Option<usize>,
}

impl AttackConfig {
    pub fn untargeted(epsilon: f64) -> Self {
        AttackConfig { epsilon, target: None }
    }

    pub fn validate(&self, model: &ModelGraph) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        if let Some(t) = self.target {
            if t >= model.num_classes() {
                return Err(Error::OutOfRange {
                    index: t,
                    len: model.num_classes(),
                });
            }
        }
        Ok(())
    }
}

/// `clip(x + ε·sign(∇x loss), 0, 1)` for the untargeted case; the targeted case
/// steps against the gradient of the target-label loss.
pub fn fgsm(model: &ModelGraph, example: &Example, config: &AttackConfig) -> Result<Example> {
    config.validate(model)?;
    let (label, direction) = match config.target {
        Some(t) => (t, -1.0),
        None => (example.label, 1.0),
    };
    let grad = model.input_gradient(example, label)?;
    let mut out = example.clone();
    for (x, g) in out.pixels.data.iter_mut().zip(&grad.data) {
        let step = if *g > 0.0 {
            config.epsilon
        } else if *g < 0.0 {
            -config.epsilon
        } else {
            0.0
        };
        *x = (*x + direction * step).clamp(0.0, 1.0);
    }
    out.group_tag = ADVERSARIAL_TAG.to_string();
    Ok(out)
}

pub fn fgsm_batch(model: &ModelGraph, examples: &[Example], config: &AttackConfig) -> Result<Vec<Example>> {
    examples.par_iter().map(|e| fgsm(model, e, config)).collect()
}

/// Fraction of examples whose predicted class differs from the label.
pub fn error_rate(model: &ModelGraph, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no examples".into()));
    }
    let wrong = examples
        .par_iter()
        .map(|e| Ok(usize::from(model.forward(e, None)?.predicted_class != e.label)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(wrong as f64 / examples.len() as f64)
}

/// Normal/adversarial pairs for the examples of `class` that the model gets
/// right and the attack flips, in input order.
pub fn successful_pairs(
    model: &ModelGraph,
    examples: &[Example],
    class: usize,
    config: &AttackConfig,
) -> Result<(Vec<Example>, Vec<Example>)> {
    let candidates: Vec<&Example> = examples.iter().filter(|e| e.label == class).collect();
    let results = candidates
        .par_iter()
        .map(|&e| {
            if model.forward(e, None)?.predicted_class != class {
                return Ok(None);
            }
            let adv = fgsm(model, e, config)?;
            let flipped = model.forward(&adv, None)?.predicted_class != class;
            Ok(flipped.then(|| (e.clone(), adv)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(results.into_iter().flatten().unzip())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{LayerParams, ModelBuilder, Shape, Tensor};

    fn linear_model(sign: f64) -> ModelGraph {
        let mut b = ModelBuilder::new("input", Shape::new(1, 2, 2));
        b.dense("fc", "input", 2);
        b.softmax("prob", "fc");
        let mut m = b.build().unwrap();
        let w = vec![1.0, -2.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0];
        m.set_params(
            "fc",
            LayerParams {
                weight: w.iter().map(|v| v * sign).collect(),
                bias: vec![0.0; 2],
            },
        )
        .unwrap();
        m
    }

    fn example() -> Example {
        Example::new(Tensor::from_vec(Shape::new(1, 2, 2), vec![0.5, 0.5, 0.95, 0.02]).unwrap(), 0, "normal")
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let m = linear_model(1.0);
        let adv = fgsm(&m, &example(), &AttackConfig::untargeted(0.0)).unwrap();
        assert_eq!(adv.pixels, example().pixels);
        assert_eq!(adv.group_tag, ADVERSARIAL_TAG);
    }

    #[test]
    fn budget_and_box_hold() {
        let m = linear_model(1.0);
        let x = example();
        let adv = fgsm(&m, &x, &AttackConfig::untargeted(0.1)).unwrap();
        for (a, b) in adv.pixels.data.iter().zip(&x.pixels.data) {
            assert!((a - b).abs() <= 0.1 + 1e-15);
            assert!((0.0..=1.0).contains(a));
        }
        // ascending the class-0 loss moves against the class-0 weights
        assert_eq!(adv.pixels.data[0], 0.4);
        assert_eq!(adv.pixels.data[1], 0.6);
        assert_eq!(adv.pixels.data[2], 0.85);
        // zero weight, zero gradient
        assert_eq!(adv.pixels.data[3], 0.02);
    }

    #[test]
    fn negated_head_flips_direction() {
        let x = example();
        let cfg = AttackConfig::untargeted(0.01);
        let up = fgsm(&linear_model(1.0), &x, &cfg).unwrap();
        let down = fgsm(&linear_model(-1.0), &x, &cfg).unwrap();
        for i in 0..3 {
            let d1 = up.pixels.data[i] - x.pixels.data[i];
            let d2 = down.pixels.data[i] - x.pixels.data[i];
            assert!((d1 + d2).abs() < 1e-15 && d1 != 0.0);
        }
    }

    #[test]
    fn targeted_descends_target_loss() {
        let m = linear_model(1.0);
        let x = example();
        let before = m.forward(&x, Some(1)).unwrap().p;
        let adv = fgsm(
            &m,
            &x,
            &AttackConfig {
                epsilon: 0.05,
                target: Some(1),
            },
        )
        .unwrap();
        assert!(m.forward(&adv, Some(1)).unwrap().p > before);
    }

    #[test]
    fn negative_epsilon_rejected() {
        let m = linear_model(1.0);
        assert!(fgsm(&m, &example(), &AttackConfig::untargeted(-0.1)).is_err());
        assert!(fgsm(
            &m,
            &example(),
            &AttackConfig {
                epsilon: 0.1,
                target: Some(2)
            }
        )
        .is_err());
    }
}
