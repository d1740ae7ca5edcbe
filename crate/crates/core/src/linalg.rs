//! Small dense helpers shared by the oracles and solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

pub(crate) fn check_len(what: &'static str, v: &Vector, expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::Dimension {
            what,
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

/// Arithmetic mean of equally sized vectors, summed in the given order.
pub fn mean_of(vectors: &[Vector]) -> Option<Vector> {
    let first = vectors.first()?;
    let mut acc = Vector::zeros(first.len());
    for v in vectors {
        acc += v;
    }
    acc /= vectors.len() as f64;
    Some(acc)
}

pub fn mean_matrix(matrices: &[Matrix]) -> Option<Matrix> {
    let first = matrices.first()?;
    let mut acc = Matrix::zeros(first.nrows(), first.ncols());
    for m in matrices {
        acc += m;
    }
    acc /= matrices.len() as f64;
    Some(acc)
}

/// Extreme eigenvalues of a symmetric matrix.
pub fn sym_eig_range(m: &Matrix) -> (f64, f64) {
    let eig = m.clone().symmetric_eigen();
    let lo = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Largest singular value.
pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().iter().cloned().fold(0.0, f64::max)
}

/// Solve `a w = v` for symmetric positive definite `a` via Cholesky.
pub fn spd_solve(a: &Matrix, v: &Vector) -> Result<Vector> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("matrix is not positive definite".into()))?;
    Ok(chol.solve(v))
}

pub fn is_finite(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Conjugate gradient for `apply(w) = b` with a symmetric positive definite
/// operator. Stops when the residual norm drops below `tol * |b|`.
pub fn conjugate_gradient<F>(apply: F, b: &Vector, tol: f64, max_iter: usize) -> Result<Vector>
where
    F: Fn(&Vector) -> Result<Vector>,
{
    let mut w = Vector::zeros(b.len());
    let mut r = b.clone();
    let mut d = r.clone();
    let mut rr = r.norm_squared();
    let target = tol * b.norm();
    for _ in 0..max_iter {
        if rr.sqrt() <= target {
            break;
        }
        let ad = apply(&d)?;
        let curv = d.dot(&ad);
        if !(curv > 0.0) {
            return Err(Error::Numerical("operator is not positive definite".into()));
        }
        let step = rr / curv;
        w.axpy(step, &d, 1.0);
        r.axpy(-step, &ad, 1.0);
        let rr_next = r.norm_squared();
        d = &r + &d * (rr_next / rr);
        rr = rr_next;
    }
    Ok(w)
}

/// Serialize a [`Vector`] as a plain JSON array.
pub mod serde_vector {
    use serde::{Deserialize, Deserializer, Serializer};

    use super::Vector;

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector, D::Error> {
        Ok(Vector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

/// Serialize a list of [`Vector`]s as nested JSON arrays.
pub mod serde_vectors {
    use serde::{Deserialize, Deserializer, Serializer};

    use super::Vector;

    pub fn serialize<S: Serializer>(vs: &[Vector], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(vs.iter().map(|v| v.as_slice()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vector>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Ok(rows.into_iter().map(Vector::from_vec).collect())
    }
}
