//! Smooth Alpert wavelet frames on dyadic grids, the paraboloid Fourier
//! extension operator, and Kakeya-type trilinear testing functionals.

pub mod alpert;
pub mod dyadic;
pub mod error;
pub mod extension;
pub mod frame;
pub mod harness;
pub mod kakeya;
pub mod modulation;
pub mod quad;
pub mod stats;

pub use dyadic::{dtree, dtree_to_slice, DyadicSquare, GridSlice, Halo, Placement, Rect};
pub use error::{Error, Result};
pub use num_complex::Complex64;
pub use quad::{SampledField2D, TensorGrid};
