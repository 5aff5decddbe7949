//! Datapath extraction and comparison for convolutional networks.
//!
//! The crate covers the analysis pipeline end to end: a small CNN engine
//! ([`nnet`]), extraction of per-layer critical feature maps ([`extraction`]),
//! comparison statistics ([`stats`]), layout geometry for the layer and
//! feature-map views ([`layout`]), neuron-level evidence ([`neuronview`]),
//! adversarial example generation ([`attacks`]), and the synthetic fixture
//! model and dataset ([`fixture`]).

pub mod attacks;
pub mod error;
pub mod extraction;
pub mod fixture;
pub mod layout;
pub mod neuronview;
pub mod nnet;
pub mod stats;

pub use error::{Error, Result};
