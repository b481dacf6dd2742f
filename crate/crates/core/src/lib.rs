pub mod error;
pub mod field;
pub mod gates;
pub mod propagation;
pub mod protocols;
pub mod stack;
pub mod tomography;
pub mod trainer;
pub mod zernike;

pub use error::{Error, Result};
