//! Direct-fitting PARAFAC2 by alternating least squares.
//!
//! Each slice is modeled as `B^[k] ≈ A · diag(Σ^[k]) · S^[k]ᵀ` with
//! `S^[k] = P^[k] H`, `P^[k]` column-orthonormal, so that `S^[k]ᵀ S^[k] = HᵀH = Φ`
//! for every `k`.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureMatrix;
use crate::linalg::{gaussian_matrix, pinv, polar, sym_eigen_desc};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum Parafac2Error {
    #[error("PARAFAC2 needs at least two slices, got {0}")]
    TooFewSlices(usize),

    #[error("rank {rank} exceeds min(MC, R) = {limit}")]
    RankTooLarge { rank: usize, limit: usize },

    #[error("slice `{model_id}` is {rows}x{cols}, expected {expected_rows}x{expected_cols}")]
    DimensionMismatch {
        model_id: String,
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },

    #[error("slice `{0}` has zero Frobenius norm")]
    DegenerateSlice(String),

    #[error("component index {index} out of range 1..={rank}")]
    IndexOutOfRange { index: usize, rank: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Parafac2Options {
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for Parafac2Options {
    fn default() -> Self {
        Parafac2Options {
            max_iter: 2000,
            tol: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parafac2Result {
    /// `A`, `MC x N`, unit-norm columns.
    pub shared_factor: DMatrix<f64>,
    /// `Σ`, `K x N`; row `k` is `diag(Σ^[k])`.
    pub loadings: DMatrix<f64>,
    /// `S^[k]`, `R x N`, unit-norm columns.
    pub sources: Vec<DMatrix<f64>>,
    /// `Φ = HᵀH`.
    pub cross_product: DMatrix<f64>,
    pub fit: f64,
    pub iterations: usize,
    pub converged: bool,
    pub fit_trace: Vec<f64>,
}

impl Parafac2Result {
    pub fn rank(&self) -> usize {
        self.shared_factor.ncols()
    }

    /// `max_k ‖S^[k]ᵀS^[k] − Φ‖_F / ‖Φ‖_F`.
    pub fn constraint_drift(&self) -> f64 {
        let norm = self.cross_product.norm();
        self.sources
            .iter()
            .map(|s| (s.transpose() * s - &self.cross_product).norm() / norm)
            .fold(0.0, f64::max)
    }
}

/// Slice `k` compressed onto its own row space: `B^[k] = Bc^[k] Vᵀ` with orthonormal `V`.
struct Compressed {
    bc: DMatrix<f64>,
    v: DMatrix<f64>,
}

fn compress(b: &DMatrix<f64>) -> Compressed {
    if b.ncols() <= b.nrows() {
        return Compressed {
            bc: b.clone(),
            v: DMatrix::identity(b.ncols(), b.ncols()),
        };
    }
    let qr = b.transpose().qr();
    Compressed {
        bc: qr.r().transpose(),
        v: qr.q(),
    }
}

fn validate(slices: &[FeatureMatrix], rank: usize) -> Result<(usize, usize), Parafac2Error> {
    if slices.len() < 2 {
        return Err(Parafac2Error::TooFewSlices(slices.len()));
    }
    let (rows, cols) = slices[0].data.shape();
    for s in slices {
        if s.data.shape() != (rows, cols) {
            return Err(Parafac2Error::DimensionMismatch {
                model_id: s.model_id.clone(),
                rows: s.rows(),
                cols: s.cols(),
                expected_rows: rows,
                expected_cols: cols,
            });
        }
    }
    let limit = rows.min(cols);
    if rank == 0 || rank > limit {
        return Err(Parafac2Error::RankTooLarge { rank, limit });
    }
    for s in slices {
        if s.data.norm() == 0.0 {
            return Err(Parafac2Error::DegenerateSlice(s.model_id.clone()));
        }
    }
    Ok((rows, cols))
}

fn hadamard(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.component_mul(b)
}

fn solve_right(lhs: &DMatrix<f64>, gram: &DMatrix<f64>) -> DMatrix<f64> {
    // lhs · gram⁻¹ for a symmetric PSD gram matrix.
    match gram.clone().cholesky() {
        Some(ch) => ch.solve(&lhs.transpose()).transpose(),
        None => lhs * pinv(gram, 1e-13),
    }
}

fn procrustes(bc: &DMatrix<f64>, a: &DMatrix<f64>, c_row: &DVector<f64>, h: &DMatrix<f64>) -> DMatrix<f64> {
    let target = a * DMatrix::from_diagonal(c_row) * h.transpose();
    polar(&(bc.transpose() * target))
}

fn residual(y: &DMatrix<f64>, a: &DMatrix<f64>, c_row: &DVector<f64>, h: &DMatrix<f64>) -> f64 {
    (y - a * DMatrix::from_diagonal(c_row) * h.transpose()).norm_squared()
}

/// Fits a rank-`rank` PARAFAC2 model to the slices `B^[k]` (`MC x R`).
///
/// Not reaching `tol` within `max_iter` iterations returns the last iterate with
/// `converged = false`.
pub fn parafac2_als(slices: &[FeatureMatrix], rank: usize, opts: &Parafac2Options) -> Result<Parafac2Result, Parafac2Error> {
    let (rows, _) = validate(slices, rank)?;
    let k_count = slices.len();
    let compressed: Vec<Compressed> = slices.par_iter().map(|s| compress(&s.data)).collect();
    let norms: Vec<f64> = slices.iter().map(|s| s.data.norm_squared()).collect();
    let total: f64 = norms.iter().sum();

    // A from the leading eigenvectors of Σ_k B Bᵀ, which equal the left
    // singular vectors of the column-concatenated slices.
    let mut gram = DMatrix::zeros(rows, rows);
    for c in &compressed {
        gram += &c.bc * c.bc.transpose();
    }
    let (vals, vecs) = sym_eigen_desc(&gram);
    let mut a = vecs.columns(0, rank).into_owned();
    if vals[rank - 1] <= 1e-12 * vals[0].max(f64::MIN_POSITIVE) {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let noise = gaussian_matrix(rows, rank, &mut rng) * 1e-3;
        a = polar(&(a + noise));
    }
    let mut h = DMatrix::<f64>::identity(rank, rank);
    let mut c = DMatrix::<f64>::from_element(k_count, rank, 1.0);

    let mut fit_trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut p: Vec<DMatrix<f64>> = Vec::new();
    let mut prev_fit = f64::NEG_INFINITY;

    while iterations < opts.max_iter {
        iterations += 1;
        p = compressed
            .par_iter()
            .enumerate()
            .map(|(k, comp)| procrustes(&comp.bc, &a, &c.row(k).transpose(), &h))
            .collect();
        let y: Vec<DMatrix<f64>> = compressed.iter().zip(&p).map(|(comp, pk)| &comp.bc * pk).collect();

        // One CP-ALS sweep on the projected slices Y_k ≈ A diag(c_k) Hᵀ.
        let mut num = DMatrix::zeros(rows, rank);
        for (k, yk) in y.iter().enumerate() {
            num += yk * &h * DMatrix::from_diagonal(&c.row(k).transpose());
        }
        a = solve_right(&num, &hadamard(&(h.transpose() * &h), &(c.transpose() * &c)));

        let mut num = DMatrix::zeros(rank, rank);
        for (k, yk) in y.iter().enumerate() {
            num += yk.transpose() * &a * DMatrix::from_diagonal(&c.row(k).transpose());
        }
        h = solve_right(&num, &hadamard(&(a.transpose() * &a), &(c.transpose() * &c)));

        let gram_ah = hadamard(&(a.transpose() * &a), &(h.transpose() * &h));
        let mut rhs = DMatrix::zeros(k_count, rank);
        for (k, yk) in y.iter().enumerate() {
            let m = a.transpose() * yk * &h;
            for n in 0..rank {
                rhs[(k, n)] = m[(n, n)];
            }
        }
        c = solve_right(&rhs, &gram_ah);

        // Move column magnitudes of A and H into the loadings.
        for n in 0..rank {
            let an = a.column(n).norm();
            let hn = h.column(n).norm();
            if an > 0.0 && hn > 0.0 {
                a.column_mut(n).scale_mut(1.0 / an);
                h.column_mut(n).scale_mut(1.0 / hn);
                c.column_mut(n).scale_mut(an * hn);
            }
        }

        let mut loss = 0.0;
        for (k, yk) in y.iter().enumerate() {
            loss += norms[k] - yk.norm_squared() + residual(yk, &a, &c.row(k).transpose(), &h);
        }
        let fit = (1.0 - loss / total).clamp(0.0, 1.0);
        fit_trace.push(fit);
        debug!("parafac2 iteration {iterations}: fit {fit:.10}");
        if (fit - prev_fit).abs() < opts.tol {
            converged = true;
            break;
        }
        prev_fit = fit;
    }
    if !converged {
        warn!("PARAFAC2 stopped after {iterations} iterations without reaching tol {:e}", opts.tol);
    }

    // Sign convention: largest |entry| of each A column positive, then loadings summing non-negative.
    for n in 0..rank {
        let col = a.column(n);
        let (imax, _) = col.iter().enumerate().fold((0, 0.0f64), |best, (i, &v)| {
            if v.abs() > best.1 {
                (i, v.abs())
            } else {
                best
            }
        });
        if a[(imax, n)] < 0.0 {
            a.column_mut(n).neg_mut();
            h.column_mut(n).neg_mut();
        }
        if c.column(n).sum() < 0.0 {
            c.column_mut(n).neg_mut();
            h.column_mut(n).neg_mut();
        }
    }

    let mut order: Vec<usize> = (0..rank).collect();
    let cnorm: Vec<f64> = (0..rank).map(|n| c.column(n).norm()).collect();
    order.sort_by(|&x, &y| cnorm[y].total_cmp(&cnorm[x]));
    let a = a.select_columns(&order);
    let h = h.select_columns(&order);
    let c = c.select_columns(&order);

    let sources: Vec<DMatrix<f64>> = compressed
        .iter()
        .zip(&p)
        .map(|(comp, pk)| &comp.v * pk * &h)
        .collect();
    let cross_product = h.transpose() * &h;
    let fit = *fit_trace.last().unwrap_or(&0.0);

    Ok(Parafac2Result {
        shared_factor: a,
        loadings: c,
        sources,
        cross_product,
        fit,
        iterations,
        converged,
        fit_trace,
    })
}

/// Column `n` (1-based) of every `S^[k]`, in slice order.
pub fn parafac2_sources(result: &Parafac2Result, n: usize) -> Result<Vec<DVector<f64>>, Parafac2Error> {
    let rank = result.rank();
    if n == 0 || n > rank {
        return Err(Parafac2Error::IndexOutOfRange { index: n, rank });
    }
    Ok(result.sources.iter().map(|s| s.column(n - 1).into_owned()).collect())
}
