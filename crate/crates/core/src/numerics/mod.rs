//! Dense symmetric linear algebra, chi-square quantiles and seeded sampling.
//!
//! Everything here works on small dense matrices (feature dimension at most a
//! few dozen, kernel matrices at most a few hundred rows).

mod chi2;
mod linalg;
mod rng;

pub use chi2::{chi2_cdf, chi2_quantile, ln_gamma, regularized_lower_gamma};
pub use linalg::{cholesky, eig_extrema_psd, is_symmetric, logdet_psd, solve_psd, CholeskyFactor, Matrix, Vector};
pub use rng::Rng;
