//! The guide under `book/`, one module per chapter. `cargo test -p
//! ulins-book` runs every snippet.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/filter.md")]
pub mod filter {}

#[doc = include_str!("../../../book/src/lidar.md")]
pub mod lidar {}

#[doc = include_str!("../../../book/src/uwb.md")]
pub mod uwb {}

#[doc = include_str!("../../../book/src/outliers.md")]
pub mod outliers {}

#[doc = include_str!("../../../book/src/simulation.md")]
pub mod simulation {}

#[doc = include_str!("../../../book/src/running.md")]
pub mod running {}
