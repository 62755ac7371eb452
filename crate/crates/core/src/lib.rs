//! Geometric core of a track-driven structure-from-motion pipeline.
//!
//! Tracks (2D observations of one 3D point across frames, with visibility and per-axis
//! uncertainty) go in; cameras and a point cloud come out. The stages are:
//!
//! 1. [`epipolar`]: batched 8-point essential estimation of every frame against a query frame.
//! 2. [`triangulation`]: multi-view DLT and ray geometry.
//! 3. [`filtering`]: visibility, uncertainty, Sampson, triangulation-angle and reprojection gates.
//! 4. [`ba`]: Levenberg-Marquardt bundle adjustment with a Schur-complement solve, and the
//!    implicit-function-theorem gradient of the optimum with respect to the observations.
//!
//! [`pipeline`] chains them and [`metrics`] scores the result.

pub mod align;
pub mod ba;
pub mod camera;
pub mod epipolar;
pub mod error;
pub mod filtering;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod scene;
pub mod synthetic;
pub mod triangulation;

pub use camera::{relative_pose, Camera, Projection, RelativePose, Similarity};
pub use error::{Error, Result};
pub use scene::{Frame, Scene, Track, TrackObservation};
