//! Linear-decay leaky integrate-and-fire (LD-LIF) spiking networks with a
//! bit-exact cycle-level model of an SRAM compute-in-memory macro that updates
//! 32 membrane potentials in parallel, plus a latency and energy cost model.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cim;
pub mod cost;
pub mod data;
pub mod error;
pub mod events;
pub mod neuron;
pub mod quant;
pub mod train;

pub use error::{Error, Result};
