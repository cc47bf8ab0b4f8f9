//! Spiking neural network training with temporal-reversible turn-on neurons.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] dense NCHW kernels (forward and explicit adjoints, no autodiff),
//! * [`neuron`] Heaviside/surrogate spike functions and the turn-off, turn-on and
//!   inverse turn-on membrane updates,
//! * [`block`] the membrane-shortcut convolution block with ReZero and weight
//!   standardization,
//! * [`network`] encode-once grouping into `T` sub-networks joined by turn-on
//!   boundary neurons,
//! * [`engine`] STBP (store everything), reversible (store the last membrane
//!   bundle and reconstruct) and masked-STBP backward passes, loss, SGD and Adam,
//! * [`metrics`] FLOP counting, the MAC/AC energy estimate and gradient cosine
//!   analysis.
//!
//! Turn-on neurons have no reset term: any reset would break the algebraic
//! inverse used by the reversible backward pass.

pub mod block;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod network;
pub mod neuron;
pub mod par;
pub mod real;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
