//! Federated learning on weighted nodes where the node weights are chosen by
//! bilevel optimization.
//!
//! The inner problem fits a model to the weighted mixture of node training
//! losses; the outer problem picks weights on a capped simplex so that the
//! fitted model does well on a small validation set held by the center.
//! Both the inner training problem and the Hessian-inverse quadratic program
//! that yields the hypergradient are solved by Local-SVRG on a simulated,
//! deterministically seeded network that counts every communication round.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod error;
pub mod experiment;
pub mod hypergrad;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod network;
pub mod outer;
pub mod simplex;
pub mod svrg;
pub mod vecops;

pub use error::{Error, Result};
pub use model::{FederatedDataset, LossModel, NodeDataset, ParamVector, SamplePoint, WeightVector};
