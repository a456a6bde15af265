//! A memory-augmented recurrent network built on a small reverse-mode
//! autodiff core: external memory with content- and location-based
//! addressing, feedforward or LSTM controllers, an LSTM baseline,
//! algorithmic task generators with analytic oracles, and a BPTT
//! training harness.

pub mod addressing;
pub mod autodiff;
pub mod controller;
pub mod error;
pub mod heads;
pub mod model;
pub mod tasks;
pub mod trace;
pub mod training;

pub use error::{NtmError, Result};
