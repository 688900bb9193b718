//! Spatio-temporal graph neural point process for traffic congestion events.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diffmath;
pub mod encoder;
pub mod error;
pub mod eventseq;
pub mod intensity;
pub mod io;
pub mod model;
pub mod nn;
pub mod predict;
pub mod selftest;
pub mod synthgen;
pub mod train;

pub use error::{Error, Result};
