use crate::error::{Error, Result};

/// Mutual information of `d` independent coordinate pairs, each a
/// bivariate standard Gaussian with correlation `rho`.
pub fn gaussian_mi_oracle(rho: f64, d: usize) -> Result<f64> {
    if !rho.is_finite() || rho.abs() >= 1.0 {
        return Err(Error::input(format!("|rho| must be < 1, got {rho}")));
    }
    if d == 0 {
        return Err(Error::input("dimension must be at least 1"));
    }
    Ok(d as f64 / 2.0 * (1.0 / (1.0 - rho * rho)).ln())
}
