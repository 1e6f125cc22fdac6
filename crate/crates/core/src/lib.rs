//! Three-branch fundus image classifier built around dynamic window proposals.
//!
//! The crate combines:
//! - an image pipeline (CLAHE contrast enhancement, ROI cropping, bilinear
//!   resizing, training-time augmentation),
//! - the dynamic window mechanism that scores feature-map windows and maps
//!   score maxima back to image-space patches,
//! - CBAM channel/spatial attention blocks,
//! - a small CPU backbone with three encoder branches fused by multi-head
//!   attention readout,
//! - a deterministic training engine with checkpoint/resume, and
//! - exact classification metrics (AP, AUC, accuracy, F1, sensitivity,
//!   specificity).
//!
//! Everything is pure CPU code with explicit seeding; repeated runs with the
//! same seed produce bit-identical results.

pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod dwm;
pub mod engine;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod network;
pub mod viz;

pub use error::{Error, Result};
