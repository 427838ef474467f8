//! Small dense helpers on top of nalgebra.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Solves `a X + X aᵀ = w` through the Kronecker form. Intended for the small
/// state dimensions used here (≤ 6).
pub fn lyapunov(a: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || w.shape() != (n, n) {
        return Err(Error::Contract("lyapunov: shape mismatch".into()));
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let op = eye.kronecker(a) + a.kronecker(&eye);
    let rhs = DMatrix::from_column_slice(n * n, 1, w.as_slice());
    let sol = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Degenerate("lyapunov operator is singular".into()))?;
    let x = DMatrix::from_column_slice(n, n, sol.as_slice());
    Ok((&x + x.transpose()) * 0.5)
}

/// Largest real part of the spectrum.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
}
