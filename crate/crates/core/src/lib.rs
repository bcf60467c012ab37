//! Simulator for satellite–ground collaborative vision-language inference.
//!
//! A compact onboard model answers Earth-observation queries unless a
//! progressive confidence network decides the sample should go to a larger
//! ground model. Offloaded images are filtered region by region using
//! text-image attention before they are queued on a contact-window-limited
//! downlink.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod confidence;
pub mod constellation;
pub mod domain;
pub mod embedding;
pub mod error;
pub mod link;
pub mod models;
pub mod orchestrator;
pub mod preprocess;
pub mod rng;

pub use error::{Error, Result};
