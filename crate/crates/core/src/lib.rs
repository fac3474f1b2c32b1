#![no_std]
// `!(x > 0.0)` style checks deliberately reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod blocksparse;
pub mod dense;
pub mod dynamics;
pub mod error;
pub mod math;
pub mod noise;
pub mod learning;
pub mod network;
pub mod oracle;
pub mod rl;
pub mod snapshot;
pub mod structure;
pub mod tasks;
