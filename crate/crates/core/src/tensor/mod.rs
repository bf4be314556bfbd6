//! Minimal dense-tensor math with reverse-mode differentiation, an Adam
//! optimizer, and a finite-difference gradient oracle.

pub mod adam;
pub mod grad_check;
pub mod matrix;
pub mod store;
pub mod tape;

pub use adam::Adam;
pub use grad_check::{grad_check, GradCheckReport};
pub use matrix::Matrix;
pub use store::{gradient_map, Bound, Param, ParamStore};
pub use tape::{Tape, Var};
