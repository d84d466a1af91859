//! Single-image novel-view synthesis at desk scale: a transformer
//! encoder/decoder predicting a vector-matrix radiance field, rendered with
//! a differentiable volume renderer and trained end-to-end on procedurally
//! generated scenes.

pub mod error;
pub mod loss;
pub mod model;
pub mod render;
pub mod scene;
pub mod attention;
pub mod camera;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
