//! Continuous-token personalized retrieval with train-only semantic
//! decodability regularizers.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffcore;
pub mod evalkit;
pub mod model;
pub mod objectives;
pub mod synthdata;
pub mod trainer;
