//! Visual-inertial odometry with explicit memory models.
//!
//! The crate implements a keyframe-based stereo/mono VIO pipeline built from
//! three layers:
//!
//! * a vision frontend ([`vfe`]): pyramidal Lucas-Kanade tracking, min-eigenvalue
//!   corner detection, stereo rectification and matching, and RANSAC outlier
//!   rejection;
//! * an IMU frontend ([`ife`]): on-manifold preintegration of gyroscope and
//!   accelerometer samples between keyframes, with covariance and bias Jacobians;
//! * a fixed-lag smoother backend ([`backend`]): structureless vision factors,
//!   preintegrated IMU factors, and marginalization over a sliding window of
//!   keyframe states.
//!
//! Alongside the estimator, the crate carries bit-exact software models of three
//! memory optimizations designed for a hardware implementation of the same
//! pipeline:
//!
//! * [`framecodec`]: a 26-bit-per-4x4-block frame compression scheme;
//! * [`backend::track_store`]: a two-stage feature-track store that splits a
//!   sparse address space from dense measurement payloads;
//! * [`backend::hessian`]: a band-structured Hessian with a zero-skipping
//!   Cholesky solver and multiply-accumulate counters.
//!
//! [`pipeline::model_report`] combines the three into an arithmetic memory and
//! operation-count model of the whole system.

pub mod backend;
pub mod dataset;
pub mod error;
pub mod framecodec;
pub mod geometry;
pub mod ife;
pub mod pipeline;
pub mod vfe;

mod book;

pub use error::VioError;
