//! Residual tensor train (ResTT) and plain tensor train multilinear models.
//!
//! The crate is organised bottom-up: [`tensor`] holds dense arrays and
//! contraction, [`model`] the network definition and forward pass, [`grad`]
//! explicit backpropagation, [`oracle`] brute-force reference evaluations,
//! [`meanfield`] the signal-propagation analysis used for initialization,
//! [`features`] and [`data`] the input pipeline, and [`train`] the optimizer.

pub mod error;
pub mod features;
pub mod data;
pub mod grad;
pub mod kv;
pub mod meanfield;
pub mod model;
pub mod oracle;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{forward, init_params, param_count, Preset, ResTTParams, Topology, TopologyMode};
pub use tensor::{contract, ContractionSpec, DenseTensor};
