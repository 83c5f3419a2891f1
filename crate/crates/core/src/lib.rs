//! CPU 3D Gaussian splatting with pixel-weighted adaptive density control.

pub mod camera;
pub mod densify;
pub mod error;
pub mod experiments;
pub mod gsmath;
pub mod img;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod ply;
pub mod renderer;
pub mod scene;
pub mod sh;
pub mod trainer;

pub use camera::Camera;
pub use error::{Error, Result};
pub use img::Image;
pub use scene::GaussianCloud;
