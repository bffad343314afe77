//! Downstream diagnostic machinery for histopathology slide embeddings.
//!
//! The crate covers the path from a low-magnification slide thumbnail to a
//! calibrated diagnostic report:
//!
//! * [`tiler`]: tissue segmentation, mask refinement and patch-grid extraction.
//! * [`bags`]: the embedding-bag model, the `CEB1` file format, fold splitting
//!   and the synthetic bag generator used as a desk-scale oracle.
//! * [`mil`]: gated-attention multiple-instance classification with analytic
//!   gradients.
//! * [`open_set`]: reciprocal-point open-set scoring and OOD detection.
//! * [`adapters`]: low-rank adapters, linear probes and a Dice-loss
//!   segmentation head.
//! * [`zero_shot`]: prompt-similarity classification and caption metrics.
//! * [`metrics`]: classification metrics, bootstrap intervals, threshold
//!   calibration and cluster statistics.
//!
//! Data-parallel loops go through [`exec::Exec`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise.
//! Results never depend on which path ran.

pub mod adapters;
pub mod bags;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod mil;
pub mod open_set;
pub mod optim;
pub mod rng;
pub mod tiler;
pub mod zero_shot;

pub use error::{Error, Result};
pub use exec::Exec;
