//! Location-relative attention for monotonic sequence alignment.
//!
//! Two families of attention are implemented on a small reverse-mode tape:
//! Gaussian-mixture attention ([`gmm`]) in three parameterizations, and the
//! additive energy family ([`energy`]) covering content-based,
//! location-sensitive and dynamic-convolution attention with a
//! beta-binomial [`prior`] filter. [`model`] wraps them in a desk-scale
//! encoder/decoder with synthetic alignment tasks, [`metrics`] provides
//! MCD-DTW and alignment diagnostics, and [`bench`] drives multi-seed trials
//! and length sweeps.

pub mod bench;
pub mod energy;
pub mod error;
pub mod gmm;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod prior;

pub use error::{Error, Result};
