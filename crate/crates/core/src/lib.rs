//! Deformable Gaussian surfel rendering with ray-traced specular
//! transport, differentiable end to end.
//!
//! The pipeline is written once, generically over [`autodiff::Real`]:
//! instantiated at `f64` it is the fast forward renderer, instantiated
//! at [`autodiff::Var`] it records a gradient tape. Discrete choices
//! (depth sort order, BVH hit sets, tile culling) are made on values
//! and are not differentiated through.

pub mod autodiff;
pub mod cli;
pub mod deform;
pub mod env_tracer;
pub mod hybrid;
pub mod image;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod parallel;
pub mod rasterizer;
pub mod scene;
pub mod splat_math;
pub mod synth;
pub mod trainer;

mod error;

pub use error::{Error, Result};
