#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod config;
pub mod degradation;
pub mod dni;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model_io;
pub mod nn;
pub mod optim;
pub mod resample;
pub mod tensor;
pub mod train;
pub mod toyface;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use image::Image;
pub use tensor::{Float, Tensor};

/// Size the worker pool used by the parallel parts of the crate. Results do
/// not depend on the count; `1` keeps everything on the calling thread.
pub fn configure_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Err(Error::InvalidArgument("thread count must be ≥ 1".into()));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(())
}
