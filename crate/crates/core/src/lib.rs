//! Viewpoint-invariant geometric signatures of depth views, with retrieval,
//! k-DPP diversification and two-way rigid validation.

pub mod dpp;
pub mod error;
pub mod eval;
pub mod feature_space;
pub mod features;
pub mod fv;
pub mod numerics;
pub mod pipeline;
pub mod retrieval;
pub mod scene;
pub mod segmentation;
pub mod validation;
mod spatial;

pub use error::{Error, Result};
pub use numerics::{Pose, RigidTransform, SeedStream, Vec3};
