//! Plane detection, tracking, and differentiable-rendering refinement on
//! posed RGB views, validated end-to-end on self-generated synthetic scenes.
//!
//! The pipeline mirrors a fragment-based reconstruction flow:
//!
//! 1. [`volume`] fuses per-view features into a sparse voxel volume and
//!    classifies occupancy from cross-view feature consistency.
//! 2. [`matcher`] decodes plane instances from voxel/query embedding dot
//!    products, matches them to ground truth with a Hungarian assignment,
//!    and aggregates per-voxel predictions into plane parameters.
//! 3. [`tracker`] carries per-plane query embeddings across fragments and
//!    merges re-detections into global instances.
//! 4. [`render`] refines plane normals, offsets, boundary and color
//!    functions by gradient descent on an image-space MSE through a
//!    differentiable bounded-plane renderer.
//! 5. [`metrics`] and [`ransac`] provide the evaluation stack; [`synth`]
//!    generates ground-truth scenes with an independent hard rasterizer.
//!
//! All heavy loops run through [`par`], which provides deterministic
//! parallelism: builds with and without the `parallel` feature produce
//! bit-identical results.

pub mod geometry;
pub mod img;
pub mod math;
pub mod matcher;
pub mod metrics;
pub mod mlp;
pub mod par;
pub mod pipeline;
pub mod ransac;
pub mod render;
pub mod synth;
pub mod tracker;
pub mod volume;

pub use geometry::{CameraView, Intrinsics, PlaneParams, PolarPoint, Pose, Ray};
pub use math::{Mat3, Vec3};
