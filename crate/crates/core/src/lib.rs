//! Tightly coupled UWB/LiDAR/IMU odometry.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod geometry;
pub mod ins;
pub mod io;
pub mod kdtree;
pub mod lidar;
pub mod msckf;
pub mod outlier;
pub mod pipeline;
pub mod runner;
pub mod sim;
pub mod uwb;

pub use error::{Error, Result};
