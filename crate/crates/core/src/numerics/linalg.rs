//! Dense decompositions with deterministic ordering and sign conventions.

use nalgebra::{DMatrix, DVector};

use crate::error::{AgfError, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

fn check_finite(m: &Mat) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AgfError::NonFinite { t: f64::NAN })
    }
}

/// Thin SVD `M = U diag(s) Vᵀ` with `s` descending and the first nonzero entry
/// of every column of `U` positive (the matching column of `V` flips with it).
pub fn svd(m: &Mat) -> Result<(Mat, Vector, Mat)> {
    check_finite(m)?;
    let (r, c) = m.shape();
    let k = r.min(c);
    if k == 0 {
        return Ok((Mat::zeros(r, 0), Vector::zeros(0), Mat::zeros(c, 0)));
    }
    let dec = m.clone().svd(true, true);
    let u = dec.u.expect("requested U");
    let vt = dec.v_t.expect("requested Vᵀ");
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| dec.singular_values[b].total_cmp(&dec.singular_values[a]).then(a.cmp(&b)));
    let mut uo = Mat::zeros(r, k);
    let mut vo = Mat::zeros(c, k);
    let mut s = Vector::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        s[dst] = dec.singular_values[src].max(0.0);
        let mut ucol = u.column(src).into_owned();
        let mut vcol = vt.row(src).transpose();
        let tol = 1e-12 * ucol.amax().max(f64::MIN_POSITIVE);
        if let Some(first) = ucol.iter().find(|x| x.abs() > tol) {
            if *first < 0.0 {
                ucol.neg_mut();
                vcol.neg_mut();
            }
        }
        uo.set_column(dst, &ucol);
        vo.set_column(dst, &vcol);
    }
    Ok((uo, s, vo))
}

/// Symmetric eigendecomposition with eigenvalues descending. Eigenvector signs
/// follow the same first-nonzero-positive convention as [`svd`].
pub fn sym_eig(m: &Mat) -> Result<(Vector, Mat)> {
    check_finite(m)?;
    let n = m.nrows();
    if m.ncols() != n {
        return Err(AgfError::Invalid(format!("sym_eig needs a square matrix, got {:?}", m.shape())));
    }
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > 1e-12 * scale {
        return Err(AgfError::NotSymmetric(asym));
    }
    let sym = (m + m.transpose()) * 0.5;
    let dec = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dec.eigenvalues[b].total_cmp(&dec.eigenvalues[a]).then(a.cmp(&b)));
    let mut vals = Vector::zeros(n);
    let mut vecs = Mat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vals[dst] = dec.eigenvalues[src];
        let mut col = dec.eigenvectors.column(src).into_owned();
        let tol = 1e-12 * col.amax().max(f64::MIN_POSITIVE);
        if let Some(first) = col.iter().find(|x| x.abs() > tol) {
            if *first < 0.0 {
                col.neg_mut();
            }
        }
        vecs.set_column(dst, &col);
    }
    Ok((vals, vecs))
}

/// Solves the SPD system `A x = b`, reporting failure as `None`.
pub fn spd_solve(a: &Mat, b: &Vector) -> Option<Vector> {
    a.clone().cholesky().map(|c| c.solve(b))
}

/// Inverse of an SPD matrix via Cholesky.
pub fn spd_inverse(a: &Mat) -> Result<Mat> {
    a.clone().cholesky().map(|c| c.inverse()).ok_or(AgfError::SingularSigma)
}

/// Orthogonal projector onto the span of the given orthonormal columns.
pub fn projector(cols: &Mat) -> Mat {
    cols * cols.transpose()
}

/// Relative Frobenius distance `‖a − b‖ / max(‖b‖, tiny)`.
pub fn rel_frobenius(a: &Mat, b: &Mat) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}
