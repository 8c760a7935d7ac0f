//! Localization engine for two-antenna, wide-spaced (super-half-wavelength)
//! WiFi arrays.
//!
//! The crate covers the full pipeline from channel measurements to target
//! and network-node positions:
//!
//! * [`array`] — steering-vector math, grating-lobe enumeration, and the
//!   near-field path-difference model;
//! * [`channel`] — synthetic CSI / RSSI generation for replayable scenes;
//! * [`music`] — the smoothed-matrix MUSIC estimator producing joint
//!   (angle, time-of-flight) pseudo-spectra and peak families;
//! * [`fusion`] — grating ambiguity resolution across nodes, RSSI
//!   likelihood scoring, packet integration, and fine-grained search;
//! * [`selfloc`] — anchor-free self-localization of the network nodes
//!   (bundled two-layer solver and the incremental baseline);
//! * [`harness`] — Monte Carlo experiment driver and report writer.

pub mod array;
pub mod channel;
pub mod error;
pub mod fusion;
pub mod geom;
pub mod harness;
pub mod music;
pub mod selfloc;
pub mod stats;

pub use error::{Error, Result};
