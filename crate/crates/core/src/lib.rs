#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coupling;
pub mod diagnostics;
pub mod io;
pub mod model;
pub mod numerics;
pub mod samplers;
pub mod tempering;
