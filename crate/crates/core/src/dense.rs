//! Dense materialization of small operators, used as a reference by tests
//! and the self-test suites.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linops::LinearMap;

/// Builds the matrix of `map` one column at a time.
pub fn materialize(map: &dyn LinearMap) -> Result<DMatrix<f64>> {
    let (n, m) = (map.domain_len(), map.range_len());
    let mut a = DMatrix::zeros(m, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = map.apply(&e)?;
        e[j] = 0.0;
        a.set_column(j, &DVector::from_vec(col));
    }
    Ok(a)
}

/// `max |a_ij - a_ji| / max |a_ij|`
pub fn symmetry_error(a: &DMatrix<f64>) -> f64 {
    let scale = a.amax();
    if scale == 0.0 {
        return 0.0;
    }
    (a - a.transpose()).amax() / scale
}

/// Extreme eigenvalues of the symmetric part, relative to the largest magnitude.
pub fn eigen_range(a: &DMatrix<f64>) -> (f64, f64) {
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen().eigenvalues;
    (eig.min(), eig.max())
}

pub fn solve_spd(a: &DMatrix<f64>, b: &[f64]) -> Result<Vec<f64>> {
    let sym = (a + a.transpose()) * 0.5;
    let rhs = DVector::from_column_slice(b);
    match sym.clone().cholesky() {
        Some(c) => Ok(c.solve(&rhs).as_slice().to_vec()),
        None => sym
            .lu()
            .solve(&rhs)
            .map(|x| x.as_slice().to_vec())
            .ok_or_else(|| Error::Numerical("dense reference system is singular".into())),
    }
}

pub fn mat_vec(a: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    (a * DVector::from_column_slice(x)).as_slice().to_vec()
}
