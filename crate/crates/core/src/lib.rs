#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batchsim;
pub mod blobstore;
pub mod msgqueue;
pub mod orchestrator;
pub mod reducer;
pub mod rng;
pub mod survey;
pub mod wavekernel;
