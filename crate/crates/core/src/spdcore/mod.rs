//! Symmetric positive-definite linear algebra and scalar distribution
//! functions shared by the rest of the crate.

mod ks;
mod matrix;
mod special;

pub use ks::{kolmogorov_q, kolmogorov_sf, ks_statistic, KsResult};
pub use matrix::{
    jacobi_eigen, mat_vec, spd_inv_sqrt, spd_sqrt, spectral_norm, Matrix, SpdMatrix,
    SymmetricEigen, SPD_RELATIVE_FLOOR,
};
pub use special::{
    chi2_cdf, chi2_quantile, huber_constant, norm_cdf, norm_pdf, norm_quantile, norm_sf,
    regularized_gamma_p, regularized_gamma_q,
};
