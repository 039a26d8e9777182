//! Low-dose CT reconstruction with an unrolled forward-backward splitting loop
//! regularized by a learned graph Laplacian.

pub mod data;
pub mod graph;
pub mod image;
pub mod metrics;
pub mod networks;
pub mod numerics;
pub mod pfbs;
pub mod projector;
pub mod training;

pub use image::Image;
pub use projector::{Geometry, Projector, Sinogram};
