//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Complex, DMatrix};

use crate::error::{dim_err, Error, Result};

pub fn ensure_square(m: &DMatrix<f64>, context: &'static str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(dim_err(
            context,
            "square matrix",
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    Ok(())
}

pub fn ensure_finite(m: &DMatrix<f64>, context: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Config(format!("{context}: matrix has non-finite entries")))
    }
}

/// Eigenvalues of a real square matrix, as complex numbers.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    ensure_square(m, "eigenvalues")?;
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    Ok(m.complex_eigenvalues().iter().copied().collect())
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    Ok(eigenvalues(m)?.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Operator 2-norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Smallest singular value; `min(rows, cols)` values are considered.
pub fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().min()
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Extreme eigenvalues `(min, max)` of the symmetric part of `m`.
pub fn symmetric_eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    let ev = symmetrize(m).symmetric_eigenvalues();
    (ev.min(), ev.max())
}

/// Spectral norm of a symmetric matrix via its eigenvalues.
pub fn symmetric_norm(m: &DMatrix<f64>) -> f64 {
    let (lo, hi) = symmetric_eig_range(m);
    lo.abs().max(hi.abs())
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() <= tol * scale
}

/// Checks that `m` is symmetric positive definite.
pub fn ensure_positive_definite(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::Config(format!(
            "{name} must be a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::Config(format!("{name} has non-finite entries")));
    }
    if !is_symmetric(m, 1e-10) {
        return Err(Error::Config(format!("{name} must be symmetric")));
    }
    let (lo, _) = symmetric_eig_range(m);
    if lo <= 0.0 {
        return Err(Error::Config(format!(
            "{name} must be positive definite (lambda_min = {lo:e})"
        )));
    }
    Ok(())
}

/// Numerical rank with threshold `tol * sigma_max`.
pub fn rank_complex(m: &DMatrix<Complex<f64>>, tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol * smax).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn radius_of_identity_is_one() {
        assert_relative_eq!(spectral_radius(&DMatrix::identity(3, 3)).unwrap(), 1.0);
    }

    #[test]
    fn radius_of_diagonal() {
        let m = DMatrix::from_diagonal(&nalgebra::dvector![0.5, -1.5]);
        assert_relative_eq!(spectral_radius(&m).unwrap(), 1.5, epsilon = 1e-14);
    }

    #[test]
    fn radius_of_scaled_rotation() {
        // characteristic polynomial l^2 + 4
        let m = DMatrix::from_row_slice(2, 2, &[0.0, -2.0, 2.0, 0.0]);
        assert_relative_eq!(spectral_radius(&m).unwrap(), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn non_square_is_rejected() {
        let m = DMatrix::<f64>::zeros(2, 3);
        assert!(matches!(spectral_radius(&m), Err(Error::Dimension { .. })));
    }

    #[test]
    fn pd_check() {
        assert!(ensure_positive_definite(&DMatrix::identity(2, 2), "Q").is_ok());
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(ensure_positive_definite(&indefinite, "Q").is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(ensure_positive_definite(&asym, "Q").is_err());
    }
}
