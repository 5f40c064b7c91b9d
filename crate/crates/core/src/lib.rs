//! Latent task-specific graph network simulator.
//!
//! A meta-learning mesh simulator: a message-passing network encodes an
//! initial mesh graph, a latent task descriptor inferred from context
//! observations by Gaussian-mixture variational inference conditions a
//! decoder, and movement primitives turn per-node weights into full smooth
//! trajectories. Includes the iterative next-step baseline family, a
//! synthetic deformable-plate benchmark with oracle ground truth, and the
//! experiment harness behind the `ltsgns` CLI.

pub mod error;
pub mod oracles;
pub mod rng;
pub mod tensor;

pub mod nn;
pub mod opt;
pub mod stats;
pub mod synth;
pub mod task;
pub mod tape;

pub mod gmm;
pub mod graph;
pub mod model;
pub mod mpn;
pub mod prodmp;
pub mod trngvi;

pub use error::{Error, Result};
pub use tensor::Tensor;
