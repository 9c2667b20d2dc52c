//! Core algorithms for the pixel DAG-RNN hyperspectral classifier.
//!
//! An image patch around a target pixel is decomposed into four overlapping
//! windows, each window is covered by a directed acyclic lattice graph whose
//! sink sits on the target pixel, and a shared-weight recurrent cell is
//! evaluated over each graph in topological order. The four sink features are
//! fused and classified by a small fully-connected head. Training runs exact
//! backpropagation through the DAG structure and is verified against a
//! central finite-difference oracle.
//!
//! This crate is `no_std` (with `alloc`) and contains no IO; file formats,
//! configuration, and the command-line driver live in the companion
//! `pdagrnn-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod data;
mod error;
pub mod graph;
pub mod linalg;
pub mod metrics;
pub mod model;
pub(crate) mod rng;
pub mod train;

pub use error::Error;

pub type Result<T> = core::result::Result<T, Error>;
