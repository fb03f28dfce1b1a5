//! Least-squares and ridge solves shared by the encoder and transition fits.

use nalgebra::{DMatrix, SymmetricEigen};

/// Ridge added when the plain normal equations are rank-deficient.
pub const FALLBACK_RIDGE: f64 = 1e-6;

/// Relative eigenvalue threshold below which a Gram matrix counts as singular.
const RANK_TOL: f64 = 1e-12;

pub struct Solution {
    /// p × m coefficient matrix mapping features to targets.
    pub coef: DMatrix<f64>,
    pub singular: bool,
}

/// True when the Gram matrix `xtx` is numerically rank-deficient.
pub fn is_rank_deficient(xtx: &DMatrix<f64>) -> bool {
    let eig = SymmetricEigen::new(xtx.clone());
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    max <= 0.0 || min <= RANK_TOL * max
}

/// Solve `min ‖Y − X·B‖² + λ‖B‖²` through the normal equations.
///
/// `x` is n × p, `y` is n × m. With `lambda == 0` and a rank-deficient design
/// the solve falls back to `FALLBACK_RIDGE` and reports `singular`.
pub fn ridge(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Solution {
    let xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    let singular = is_rank_deficient(&xtx);
    let lam = if lambda > 0.0 {
        lambda
    } else if singular {
        FALLBACK_RIDGE
    } else {
        0.0
    };
    let p = xtx.nrows();
    let gram = xtx + DMatrix::<f64>::identity(p, p) * lam;
    let coef = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&xty),
        None => gram.svd(true, true).solve(&xty, 1e-14).unwrap_or_else(|_| DMatrix::zeros(p, y.ncols())),
    };
    Solution { coef, singular }
}
