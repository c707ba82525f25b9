//! Chemical shift encoded MRI: multi-peak signal model, solution-set analysis,
//! single-voxel Wirtinger flow with certified radii, and fieldmap-constrained
//! image reconstruction.

pub mod config;
pub mod container;
pub mod error;
pub mod experiments;
pub mod imaging;
pub mod linalg;
pub mod phantom;
pub mod residual;
pub mod solution_set;
pub mod solver;
pub mod species_model;

pub use error::{Error, Result};
pub use num_complex::Complex64;

pub type CMat = nalgebra::DMatrix<Complex64>;
pub type CVec = nalgebra::DVector<Complex64>;
