//! Projected conditional flow matching (PCFM) for unsupervised reconstruction of
//! undersampled multi-coil MRI.

pub mod dense;
pub mod error;
pub mod flow;
pub mod io;
pub mod linops;
pub mod model;
pub mod numerics;
pub mod recon;
pub mod sim;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use numerics::{ComplexImage, ComplexVector, RngState, C64};
