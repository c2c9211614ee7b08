//! Depth-guided learning of pixel-aligned signed-distance fields for
//! single-view surface reconstruction, trained and validated on procedurally
//! generated analytic shapes.
//!
//! The pipeline mirrors the usual estimator → implicit-function layout:
//! a normal estimator and a depth estimator turn an image into a depth map,
//! and an SDF-valued pixel-aligned implicit function conditioned on that
//! depth map answers signed-distance queries at arbitrary 3D points.
//! Two self-supervision signals, volume pseudo-labels sampled along camera
//! rays and a differentiably rendered depth map, let the implicit function
//! fine-tune on depth maps alone, without ground-truth geometry.
//!
//! Everything runs on the CPU on top of a small reverse-mode tape
//! ([`diffcore`]); shapes, renders and metrics are exact enough to test
//! against closed-form oracles.

pub mod diffcore;
pub mod geometry;
pub mod synthdata;
pub mod nets;
pub mod estimators;
pub mod pifu;
pub mod selfsup;
pub mod render;
pub mod meshing;
pub mod metrics;
pub mod ckpt;
pub mod config;
pub mod parallel;
pub mod pipeline;
pub mod seed;
