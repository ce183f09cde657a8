//! Construction kit, static analyzer and small trainer for improved residual
//! networks.
//!
//! Networks are described symbolically as an [`graph::ArchGraph`], built from
//! the block constructors in [`blocks`] and the whole-network builders in
//! [`networks`]. The [`analyzer`] counts parameters and FLOPs on that IR, and
//! [`model`] lowers a graph onto the reverse-mode [`engine`] so it can be
//! trained with [`trainer`].
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod analyzer;
pub mod blocks;
pub mod engine;
mod error;
pub mod graph;
pub mod model;
pub mod networks;
pub mod trainer;

pub use error::{Error, Result};
