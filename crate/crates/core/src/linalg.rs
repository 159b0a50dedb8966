//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use rand::Rng;
use rand_distr::StandardNormal;

/// Thin SVD with singular values sorted in decreasing order.
pub(crate) struct SortedSvd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

pub(crate) fn svd_sorted(m: &DMatrix<f64>) -> SortedSvd {
    let svd = SVD::new(m.clone(), true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let s = svd.singular_values;
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let u = DMatrix::from_fn(u.nrows(), idx.len(), |i, j| u[(i, idx[j])]);
    let v = DMatrix::from_fn(v_t.ncols(), idx.len(), |i, j| v_t[(idx[j], i)]);
    let s = DVector::from_fn(idx.len(), |i, _| s[idx[i]]);
    SortedSvd { u, s, v }
}

/// Orthonormal polar factor `U Vᵀ` of a tall matrix, i.e. the column-orthonormal
/// matrix `Q` maximizing `tr(Qᵀ m)`.
pub(crate) fn polar(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.ncols();
    if m.nrows() > n {
        // Q = m (mᵀm)^(-1/2); kept only when accurate to working precision.
        let (vals, vecs) = sym_eigen_desc(&(m.transpose() * m));
        if vals[n - 1] > 1e-8 * vals[0] {
            let inv_sqrt = DVector::from_fn(n, |i, _| 1.0 / vals[i].sqrt());
            let q = m * (&vecs * DMatrix::from_diagonal(&inv_sqrt) * vecs.transpose());
            let err = (q.transpose() * &q - DMatrix::identity(n, n)).norm();
            if err <= 1e-12 {
                return q;
            }
        }
    }
    let svd = svd_sorted(m);
    &svd.u * svd.v.transpose()
}

/// Moore-Penrose pseudo-inverse; singular values below `rtol * s_max` are dropped.
pub(crate) fn pinv(m: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    let svd = svd_sorted(m);
    let smax = svd.s.iter().cloned().fold(0.0, f64::max);
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    for (j, &s) in svd.s.iter().enumerate() {
        if s > rtol * smax && s > 0.0 {
            let v = svd.v.column(j);
            let u = svd.u.column(j);
            out += (v * u.transpose()) / s;
        }
    }
    out
}

/// Eigen-decomposition of a symmetric matrix, eigenpairs sorted by decreasing value.
pub(crate) fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = DVector::from_fn(idx.len(), |i, _| eig.eigenvalues[idx[i]]);
    let vecs = DMatrix::from_fn(m.nrows(), idx.len(), |i, j| eig.eigenvectors[(i, idx[j])]);
    (vals, vecs)
}

/// 2-norm condition number; infinite for singular input.
pub(crate) fn condition_number(m: &DMatrix<f64>) -> f64 {
    let s = SVD::new(m.clone(), false, false).singular_values;
    let max = s.iter().cloned().fold(0.0, f64::max);
    let min = s.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `ln |det m|` via LU; `-inf` for singular input.
pub(crate) fn log_abs_det(m: &DMatrix<f64>) -> f64 {
    let lu = m.clone().lu();
    let u = lu.u();
    (0..u.nrows()).map(|i| u[(i, i)].abs().ln()).sum()
}

/// `ln det` of a symmetric positive-definite matrix via Cholesky.
pub(crate) fn log_det_spd(m: &DMatrix<f64>) -> Option<f64> {
    let chol = m.clone().cholesky()?;
    let l = chol.l_dirty();
    Some((0..m.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum())
}

/// Matrix of i.i.d. standard normal draws.
pub(crate) fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Pearson correlation of two equal-length slices. `None` when either has zero variance.
pub(crate) fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}
