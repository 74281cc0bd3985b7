//! Dense tensors with a reverse-mode differentiation tape.

mod array;
pub mod checkpoint;
pub mod gradcheck;
mod kernels;
mod ops;
mod params;
mod sparse;
mod tape;

pub use array::{broadcast_shape, Tensor};
pub use gradcheck::{gradcheck, gradcheck_params, sample_entries, GradcheckReport};
pub use ops::concat;
pub use params::{Bound, ParamStore};
pub use sparse::{from_rows as sparse_from_rows, SparseRows, SparseRowsBuilder};
pub use tape::{BinaryKind, Gradients, Tape, UnaryKind, Var, LEAKY_SLOPE, NORM_EPS};
