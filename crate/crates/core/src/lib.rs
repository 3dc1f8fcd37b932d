//! Flow-based vehicle–infrastructure cooperative 3D detection at desk scale.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod cli;
pub mod codec;
pub mod error;
pub mod featurizer;
pub mod flow;
pub mod fusion;
pub mod geometry;
pub mod metrics;
pub mod rng;
pub mod scene;

pub use error::{Error, Result};
