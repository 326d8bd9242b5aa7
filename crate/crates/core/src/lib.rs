//! EU-Net: U-Net-family segmentation networks with MHEX+ side blocks,
//! equivalent-kernel class activation maps, and collaboration-gradient
//! uncertainty, on a small CPU autodiff engine.

pub mod data;
pub mod error;
pub mod explain;
pub mod harness;
pub mod loss;
pub mod mhex;
pub mod models;
pub mod par;
pub mod tensor;
pub mod uncertainty;

pub use error::{Error, Result};
pub use par::Exec;
pub use tensor::{Tape, Tensor, Var};
