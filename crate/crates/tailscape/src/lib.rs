//! Desk-scale laboratory for long-tailed classification training.
//!
//! The crate trains small dense networks with exact manual gradients on
//! synthetic long-tailed Gaussian-mixture data and implements a grouped
//! continual-learning style objective: a per-class memory bank of best
//! encoder snapshots, spectral (NCut) grouping of classes, a grouped
//! Fisher-weighted parameter-preservation penalty, and a grouped
//! sharpness-aware perturbation whose direction removes the head-dominated
//! global gradient component. Loss-geometry probes (Hessian sharpness,
//! filter-normalized landscape grids, gradient similarity, convergence
//! floor) round out the lab.

pub mod artifacts;
pub mod compare;
pub mod config;
pub mod data;
pub mod error;
pub mod gkp;
pub mod grouping;
pub mod gsa;
pub mod net;
pub mod probes;
pub mod quality;
pub mod trainer;

pub use error::{Error, Result};
