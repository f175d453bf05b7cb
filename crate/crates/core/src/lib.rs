//! Building and tree change detection between a laser-scanning point cloud and
//! an image dense-matching point cloud of the same area.
//!
//! The pipeline runs in three stages:
//!
//! 1. Both clouds are rasterized to DSMs, normalized against a shared DTM from
//!    progressive TIN densification ([`terrain`]) and converted to gray patch
//!    pairs ([`raster`]).
//! 2. A shared-weight Siamese CNN ([`sicnn`]) scores every pair; the feature
//!    distance is thresholded into changed / unchanged.
//! 3. Changed patches are grouped into regions, segmented into roof planes and
//!    tree clutters ([`segmentation`]) and verified per object ([`change`]):
//!    roofs against the other cloud, trees against the orthoimage.
//!
//! [`synth`] generates two-epoch scenes with ground truth, and [`evalx`] scores
//! patch-level predictions.

pub mod change;
pub mod cli;
pub mod error;
pub mod evalx;
pub mod pointcloud_io;
pub mod raster;
pub mod segmentation;
pub mod sicnn;
pub mod synth;
pub mod terrain;

mod spatial;

pub use error::{Error, Result};
