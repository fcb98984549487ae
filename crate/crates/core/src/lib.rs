//! Neural architecture search for message-passing graph neural networks.
//!
//! The crate is `no_std` (with `alloc`). It holds the numeric kernel, the
//! search space, the GNN builder, constrained parameter sharing, the trainer
//! and the reinforced conservative controller. File formats, the CLI and
//! wall-clock timing live in the companion `agnn` crate.
//!
//! Enable the `std` feature to let the matrix kernel use runtime CPU feature
//! detection.
#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod controller;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod math;
pub mod registry;
pub mod search;
pub mod space;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
