pub mod error;
pub mod geometry;
pub mod image;
pub mod projector;
pub mod solvers;
pub mod sugar;
pub mod transforms;

pub use error::{Error, Result};
pub use geometry::FanBeamGeometry;
pub use image::{Image, Sinogram};
pub mod cli;
pub mod data;
