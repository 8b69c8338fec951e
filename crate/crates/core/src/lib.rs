pub mod besov;
pub mod calibration;
pub mod config;
pub mod error;
pub mod fft;
pub mod galerkin;
pub mod gaussian;
pub mod harness;
pub mod ou;
pub mod paracontrolled;
pub mod paraproduct;
pub mod projection;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};
pub use spectral::{GridField, LatticePoint, MultiplierTable, SpectralField};
