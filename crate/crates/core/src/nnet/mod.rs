//! Minimal CNN engine: layer DAG, forward passes with optional feature-map
//! masks, and reverse-mode gradients.

mod exec;
mod graph;
pub mod io;

pub use exec::{ActivationTrace, Example, Mask, Objective, Tensor};
pub(crate) use exec::dot;
pub use graph::{
    Hierarchy, HierarchyNode, LayerKind, LayerNode, LayerParams, ModelBuilder, ModelGraph, Shape,
    MAX_CHANNELS, MAX_INPUT_SIDE, MAX_NODES, MAX_PARAMETRIC_LAYERS,
};

use sha2::{Digest, Sha256};

use crate::error::Result;

/// A named set of examples analyzed together.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleSet {
    pub name: String,
    pub examples: Vec<Example>,
}

impl ExampleSet {
    pub fn new(name: impl Into<String>, examples: Vec<Example>) -> Self {
        ExampleSet {
            name: name.into(),
            examples,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Content hash of the encoded examples (the name is not part of it).
    pub fn hash(&self) -> Result<String> {
        let bytes = io::encode_examples(&self.examples)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}
