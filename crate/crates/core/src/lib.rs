//! Certification of data-poisoning attacks against SGD-trained models.
//!
//! The crate replays training deterministically ([`train`]), describes what an
//! adversary may change ([`threat`]), over-approximates every poisoned training
//! trajectory with intervals ([`interval`]), compiles the whole
//! train/attack/evaluate pipeline into an exportable MIQCP ([`encode`]) and
//! searches for the worst-case attack with branch-and-bound ([`solve`]).

pub mod cli;
pub mod data;
pub mod encode;
pub mod error;
pub mod interval;
pub mod solve;
pub mod threat;
pub mod train;

pub use error::{Error, Result};
