//! voxproto: a desk-scale 3D semantic occupancy sandbox.
//!
//! The crate implements, end to end and in plain Rust, the core mechanisms of a
//! prototype-aware camera-to-voxel occupancy network:
//!
//! * [`numeric`] — dense f64 tensors, a reverse-mode autodiff tape, and a
//!   finite-difference gradient checker; every differentiable building block
//!   in the crate runs on this tape.
//! * [`scene`] — procedural synthetic scenes (boxes and spheres in a voxel
//!   grid), a pinhole camera rig, a raycast feature renderer, voxel-to-image
//!   projection, and a binary scene file format.
//! * [`clustering`] — 2D pixel prototype extraction on rendered feature maps
//!   and pseudo-mask generation (grid k-means or ground-truth derived).
//! * [`view_transform`] — prototype-to-voxel aggregation / dispatch and
//!   deformable cross-attention, composed into a multi-layer encoder that
//!   lifts image features onto a 3D voxel query grid.
//! * [`proto_opt`] — affinity-to-image mapping, prototype-weighted pixel
//!   features, and a mask-centroid contrastive loss that sharpens the
//!   affinity field at image resolution.
//! * [`decoder`] — multi-branch occupancy decoding: per-branch feature
//!   augmentation, shared transposed-convolution upsampling, per-cell
//!   classification, and a sharpened cross-branch consistency loss.
//! * [`losses`] — occupancy cross-entropy, Lovász-softmax, the combined
//!   training objective, and mIoU metrics.
//! * [`harness`] — experiment configuration, model assembly, the training /
//!   evaluation / ablation drivers, checkpoints, and the verification suites
//!   behind the `gradcheck` and `oracle-check` CLI subcommands.

pub mod clustering;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod losses;
pub mod numeric;
pub mod proto_opt;
pub mod scene;
pub mod view_transform;

pub use error::{Error, Result};
