//! Multi-agent map-fusion: aligns asynchronous posed RGB-D / point-cloud
//! streams into one global frame (a one-time Sim(3) alignment per agent) and
//! continually optimizes a shared metric-semantic map of isotropic 3D
//! Gaussians from the streamed data.

pub mod alignment;
pub mod correspondence;
pub mod frame;
pub mod geometry;
pub mod semantics;
pub mod stream;
pub mod splatmap;
