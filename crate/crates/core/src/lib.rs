//! Large-kernel 3D depthwise convolution under structural re-parameterization.
//!
//! The crate covers:
//!
//! * [`conv3d`]: direct depthwise (and small dense) 3D convolutions with
//!   exact input and kernel gradients.
//! * [`autodiff`]: a reverse-mode tape over tensor primitives plus a
//!   central-difference oracle.
//! * [`reparam`]: two-branch large+small blocks, their merged single
//!   kernel, branch-wise SGD/AdamW updates and the induced per-offset
//!   learning-rate field.
//! * [`lrbm`]: the reciprocal distance prior, the depthwise mask generator
//!   and kernel modulation/folding.
//! * [`erf`]: effective receptive field probing.
//! * [`encoder`]: a toy volumetric encoder and synthetic segmentation task
//!   comparing plain, fixed-prior and learned-prior kernels.

pub mod autodiff;
pub mod conv3d;
pub mod encoder;
pub mod erf;
pub mod error;
pub mod export;
pub mod kvconfig;
pub mod lrbm;
pub mod reparam;
pub mod rt3d;
pub mod tensor;
pub mod verify;

pub use conv3d::{dwconv3d, dwconv3d_backward, embed_kernel, DepthwiseKernel};
pub use error::{Error, Result};
pub use tensor::{seeded_normal, Rng, Tensor};
