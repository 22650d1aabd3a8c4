// Negated float comparisons are used on purpose: they reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod fem;
pub mod io;
pub mod linalg;
pub mod mesh;
pub mod monreg;
pub mod montest;
pub mod onestep;
pub mod pipeline;
pub mod sensitivity;

pub use error::{Error, Result};
