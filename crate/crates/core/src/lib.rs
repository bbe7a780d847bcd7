pub mod baseline_attn;
pub mod correlation;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod numerics;
pub mod optim;
pub mod refine;
pub mod scan;
pub mod synth;

pub use error::{Error, Result};
