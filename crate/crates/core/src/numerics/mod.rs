//! Dense tensors, a reverse-mode tape, transformer layers, AdamW and
//! checkpoint I/O.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod real;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{softmax_in_place, Graph, Mask, Var, IGNORE_INDEX};
pub use optim::{AdamW, AdamWConfig, LinearSchedule};
pub use params::{Gradients, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
