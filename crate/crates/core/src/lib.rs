// `!(x > 0.0)` guards also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod controllers;
pub mod dataset;
pub mod dynamics;
pub mod error;
pub mod io;
pub mod experiments;
pub mod koopman;
pub mod matfun;
pub mod nn;
pub mod online;
pub mod sim;
pub mod training;
pub mod uncertainty;

pub use error::{Error, Result};
