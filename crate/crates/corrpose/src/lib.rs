//! corrpose — dense-correspondence 6D object pose estimation from a mesh
//! object model, with self-synthesized training data.
//!
//! The toolkit covers the full loop:
//!
//! 1. **Geometry** – poses, intrinsics, object-frame canonicalization,
//!    hemisphere viewpoint sampling, crop intrinsics.
//! 2. **Raster** – software triangle renderer producing per-pixel
//!    object-coordinate, depth, mask and color buffers.
//! 3. **Synth** – procedural objects, training-set generation,
//!    cut-and-paste / color / white-balance / affine augmentation.
//! 4. **Embed** – coordinate-field key network, convolutional query
//!    network with mask head, InfoNCE + cross-entropy training, gradient
//!    checking, and an analytic feature oracle.
//! 5. **Pose** – mask-weighted similarity, importance-sampled 2D-3D
//!    correspondences, P3P/RANSAC, render-based and depth refinement.
//! 6. **Metrics** – ADD(-S), 5cm/5deg, MSSD/MSPD/VSD and their averaged
//!    recall, forward Chamfer distance.
//! 7. **Registration** – Umeyama similarity alignment and scale-aware ICP.
//! 8. **Pipeline** – end-to-end orchestration with content-hash caching.
//!
//! The companion guide under `book/` walks through each stage; its code
//! snippets are compiled as doc-tests (see `booktests`).

pub mod error;
pub mod geometry;
pub mod img;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod pose;
pub mod raster;
pub mod registration;
pub mod rng;
pub mod spatial;
pub mod synth;

pub mod embed;

pub use error::{Error, Result};

#[cfg(doctest)]
mod booktests;
