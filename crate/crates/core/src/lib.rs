//! RGB + LiDAR road segmentation.
//!
//! The crate covers the whole pipeline: Altitude Difference Image
//! preprocessing ([`adi`]), the dual-stream encoder ([`encoder`]), per-scale
//! cross-modal fusion ([`fusion`]), the large-kernel bridge and decoder
//! ([`decoder`]), losses ([`loss`]), metrics ([`metrics`]), datasets and
//! checkpoints ([`data`], [`checkpoint`]) and the training loop ([`train`]).

pub mod adi;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
