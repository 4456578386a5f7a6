//! Stratified rerandomization: design, balance criteria, and inference.

pub mod balance;
pub mod cli;
pub mod design;
pub mod error;
pub mod inference;
pub mod numeric;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
