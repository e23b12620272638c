//! Camera pose estimation that adaptively combines structure-based (2D-3D)
//! and structure-less (2D-2D) evidence.

pub mod estimator;
pub mod geometry;
pub mod refine;
pub mod scoring;
pub mod sim;
pub mod solvers;
