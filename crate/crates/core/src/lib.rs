#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod nn;
pub mod oracle;
pub mod noise;
pub mod risk;
pub mod tensor;
pub mod train;
