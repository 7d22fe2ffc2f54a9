// Negated float comparisons are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod fusion;
pub mod graph;
pub mod pruning;
pub mod tensor;
pub mod trainer;
pub mod zoo;
