//! Joint ego-motion and motion-segmentation refinement for visual odometry
//! in dynamic scenes, with a synthetic scene simulator and trajectory tools.

pub mod depth;
pub mod epipolar;
pub mod error;
pub mod evaluation;
pub mod flow;
pub mod geometry;
pub mod grid;
pub mod par;
pub mod pgm;
pub mod pipeline;
pub mod plot;
pub mod pose;
pub mod segmentation;
pub mod simulator;

pub use error::{Error, Result};
pub use nalgebra;
