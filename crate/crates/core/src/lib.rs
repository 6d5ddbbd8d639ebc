//! Depth-elastic decoder inference built around a frozen trunk.
//!
//! A pretrained decoder stack (the trunk) is kept byte-for-byte frozen while
//! small exit modules (balconies) are attached after chosen layers and trained
//! to mimic the full model's output distribution. At inference time a compute
//! budget picks which exit to run, and the KV cache built for the shared trunk
//! layers is reused across budget swaps.
//!
//! Everything runs on plain CPU tensors with reverse-mode autodiff recorded on
//! a tape. Reductions use a fixed evaluation order, so training runs, forward
//! probes, and checkpoint round-trips are bitwise reproducible for a given
//! seed regardless of thread count.

pub mod ckpt;
pub mod error;
pub mod exits;
pub mod gradcheck;
pub mod infer;
pub mod kernels;
pub mod model;
pub mod prune;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod threads;
pub mod train;

pub use error::Error;
pub type Result<T> = std::result::Result<T, Error>;
