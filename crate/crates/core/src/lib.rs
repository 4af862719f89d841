//! Lane/traffic-element scene graphs: data model, scene-graph message
//! passing with prediction heads and losses, and the detection/topology
//! evaluation suite.

pub mod assignment;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod heads;
pub mod loss;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod scene;
pub mod scene_io;
pub mod sgnn;
pub mod synth;

pub use error::{Error, Result};
pub use matrix::DenseMatrix;
