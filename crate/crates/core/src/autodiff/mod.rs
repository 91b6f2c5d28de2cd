//! Reverse-mode automatic differentiation over a flat parameter store.

mod check;
mod checkpoint;
mod graph;
mod tape;

pub use check::grad_check;
pub use checkpoint::Checkpoint;
pub use graph::{posenc_dim, sigmoid, softplus, Graph, InputGrads, Matrix, NodeId, RaySpan};
pub(crate) use graph::posenc_row;
pub use tape::{ParameterTape, Segment, SegmentId};
