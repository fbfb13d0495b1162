//! Factor-model estimation for panels with weak factors, borrowing strength
//! from auxiliary panels through their estimated loading spaces.

pub mod appkit;
pub mod error;
pub mod estimate;
pub mod linalg;
pub mod select;
pub mod simgen;
pub mod transfer;

pub use error::{Error, Result};
