//! Image-to-point-cloud registration: geometry primitives, normal
//! estimation, graph attention refinement, training losses, two-stage
//! matching, PnP-RANSAC pose recovery, metrics and a synthetic scene
//! generator.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod embed;
pub mod error;
pub mod features;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod knn;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod normals;
pub mod pipeline;
pub mod pose;
pub mod synth;

pub use error::{Error, Result};
pub use features::{Carrier, FeatureField};
pub use geometry::{CameraIntrinsics, DepthMap, NormalField, PointCloud, RigidTransform, Vec3};
