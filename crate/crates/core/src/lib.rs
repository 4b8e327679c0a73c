//! Two-branch convolutional network for low-resolution facial expression
//! recognition, trained with attention-similarity knowledge distillation.
//!
//! * [`attention`]: depthwise channel/spatial attention and the mixed-attention block
//! * [`global`]: the multi-scale mixed-channel block
//! * [`network`]: the assembled two-branch network
//! * [`distill`]: losses, optimiser and teacher/student training loops
//! * [`data`]: low-resolution dataset fabrication and paired loading
//! * [`checkpoint`]: versioned parameter files
//! * [`harness`]: configuration, evaluation reports and the command implementations

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod exec;
pub mod global;
pub mod harness;
pub mod kernels;
pub mod network;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
