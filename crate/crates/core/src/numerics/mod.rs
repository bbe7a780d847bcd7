//! Dense tensors, seeded randomness and the S2CT file format.

mod io;
mod rng;
mod tensor;

pub use io::{
    decode, encode, load_dyn, load_tensor, save_tensor, to_dyn, Bundle, DynTensor, HEADER_LEN,
    MAGIC, MANIFEST, VERSION,
};
pub use rng::Rng;
pub use tensor::{l2_normalize_rows, matmul, sigmoid, DType, Scalar, Tensor, MAX_RANK};

pub(crate) use tensor::{add_assign, dot, matvec, matvec_t_acc, max_abs_diff, outer_acc};
