//! Volumetric-scattering forward renderer and inverse-rendering optimizer
//! for articulated signed-distance-field avatars.

pub mod articulation;
pub mod autodiff;
pub mod camera;
pub mod error;
pub mod eval;
pub mod fields;
pub mod io;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod raster;
pub mod render;
pub mod scene;
pub mod sampling;
pub mod shading;
pub mod toy;

pub use error::{Error, Result};
