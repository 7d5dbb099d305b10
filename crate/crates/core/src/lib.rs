//! Physics-based underwater image restoration and perspective spatial
//! transformers, built on a small hand-differentiated numeric core.
//!
//! - [`tensor`]: grids, convolution, resampling, activations, dropout, Adam
//!   and finite-difference checking.
//! - [`imaging`]: the haze formation model `I = J t + A (1 - t)` and its
//!   inversion.
//! - [`dcp`]: dark channel prior statistics, background-light estimation and
//!   the `B(x)` reparameterization `J = B I - B + 1`.
//! - [`transmission`] and [`deblur`]: the two learned branches.
//! - [`stn`]: homography grid generation, bilinear sampling and the
//!   localization network.
//! - [`trainer`]: losses, synthetic datasets and the two training loops.
//! - [`gradcheck`]: the finite-difference audit of every backward pass.
//! - [`io`]: Netpbm images, the weights container, run configs and metrics CSV.

pub mod dcp;
pub mod deblur;
pub mod error;
pub mod gradcheck;
pub mod imaging;
pub mod io;
pub mod rng;
pub mod stn;
pub mod tensor;
pub mod trainer;
pub mod transmission;

pub use error::{Error, Result};
pub use tensor::Grid;
