//! Minimal numeric core: tensors, a reverse-mode tape, layers, Adam, EMA,
//! finite-difference checking and checkpoint files.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, Var};
pub use optim::Adam;
pub use params::{ema_update, Param, ParamSet};
pub use tensor::{l2_normalize, l2_normalize_rows, DType, Scalar, Tensor};
