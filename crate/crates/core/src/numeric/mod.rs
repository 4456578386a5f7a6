//! Special functions and small SPD linear algebra shared by every module.

mod linalg;
mod special;

pub use linalg::{cholesky, solve_spd, Cholesky, SpdMatrix};
pub use special::{
    chi2_cdf, chi2_pdf, chi2_quantile, chi2_sf, ln_gamma, normal_cdf, normal_pdf, normal_quantile,
    normal_sf, reg_lower_gamma, reg_upper_gamma,
};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("{routine} did not converge within {iterations} iterations")]
    Accuracy { routine: &'static str, iterations: usize },
    #[error("matrix is singular: non-positive pivot at index {pivot}")]
    Singular { pivot: usize },
    #[error("matrix is not symmetric at ({row}, {col})")]
    Asymmetric { row: usize, col: usize },
}
