#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod error;
pub mod harness;
pub mod identification;
pub mod linalg;
pub mod precise;
pub mod riccati;
pub mod rng;
pub mod stabilization;
pub mod system;
