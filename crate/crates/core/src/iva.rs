//! PCA whitening per model and second-order independent vector analysis (IVA-G).

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureMatrix;
use crate::linalg::{condition_number, gaussian_matrix, log_abs_det, log_det_spd, pinv, svd_sorted};

/// Relative singular-value threshold below which a direction counts as rank deficient.
pub const RANK_RTOL: f64 = 1e-10;
/// Ridge added to every SCV covariance before its log-determinant.
pub const SCV_RIDGE: f64 = 1e-9;
/// Condition number above which a demixing matrix is rejected.
pub const MAX_CONDITION: f64 = 1e12;

const INIT_PERTURBATION: f64 = 1e-3;
const MAX_HALVINGS: usize = 30;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum IvaError {
    #[error("model `{model_id}`: order {order} exceeds numerical rank {rank}")]
    OrderExceedsRank { model_id: String, order: usize, rank: usize },

    #[error("IVA needs at least two datasets, got {0}")]
    TooFewDatasets(usize),

    #[error("dataset {index} is {rows}x{cols}, expected {expected_rows}x{expected_cols}")]
    DimensionMismatch {
        index: usize,
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },

    #[error("need more samples ({samples}) than sources ({order})")]
    TooFewSamples { samples: usize, order: usize },

    #[error("demixing matrix of dataset {dataset} is singular (condition number {condition:e})")]
    SingularDemixing { dataset: usize, condition: f64 },

    #[error("SCV index {index} out of range 1..={order}")]
    IndexOutOfRange { index: usize, order: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Whitened principal components of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaReduction {
    pub model_id: String,
    /// `X`, `N x R`, unit sample covariance.
    pub reduced: DMatrix<f64>,
    /// `D`, `N x MC`, with `X = D * (B - row means)ᵀ`.
    pub reduction_matrix: DMatrix<f64>,
    pub explained_variance: f64,
}

impl PcaReduction {
    pub fn order(&self) -> usize {
        self.reduced.nrows()
    }
}

/// Number of singular values of `m` at or above `RANK_RTOL * s_max`.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let s = nalgebra::SVD::new(m.clone(), false, false).singular_values;
    let smax = s.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v >= RANK_RTOL * smax).count()
}

/// Reduces `B` (`MC x R`) to `order` whitened components over the `R` projected samples.
///
/// Emits a warning when the retained variance falls below `min_variance`.
pub fn pca_reduce(b: &FeatureMatrix, order: usize, min_variance: f64) -> Result<PcaReduction, IvaError> {
    let samples = b.cols();
    // Observations are the R columns; remove the per-variable mean over them.
    let mut obs = b.data.transpose();
    for mut col in obs.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let svd = svd_sorted(&obs);
    let smax = svd.s.iter().cloned().fold(0.0, f64::max);
    let rank = if smax == 0.0 {
        0
    } else {
        svd.s.iter().filter(|&&v| v >= RANK_RTOL * smax).count()
    };
    if order == 0 || order > rank {
        return Err(IvaError::OrderExceedsRank {
            model_id: b.model_id.clone(),
            order,
            rank,
        });
    }
    let total: f64 = svd.s.iter().map(|s| s * s).sum();
    let kept: f64 = svd.s.iter().take(order).map(|s| s * s).sum();
    let explained_variance = (kept / total).clamp(0.0, 1.0);
    if explained_variance < min_variance {
        warn!(
            "model `{}`: {} components keep {:.3} of the variance (target {:.3})",
            b.model_id, order, explained_variance, min_variance
        );
    }
    // obs = U S Vᵀ with U over R samples and V over MC variables.
    let scale = (samples as f64).sqrt();
    let mut d = DMatrix::zeros(order, b.rows());
    let mut x = DMatrix::zeros(order, samples);
    for n in 0..order {
        let s = svd.s[n];
        d.row_mut(n).copy_from(&(svd.v.column(n).transpose() * (scale / s)));
        x.row_mut(n).copy_from(&(svd.u.column(n).transpose() * scale));
    }
    Ok(PcaReduction {
        model_id: b.model_id.clone(),
        reduced: x,
        reduction_matrix: d,
        explained_variance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IvaOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for IvaOptions {
    fn default() -> Self {
        IvaOptions {
            max_iter: 1024,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvaResult {
    /// `W^[k]`, `N x N`.
    pub demixing: Vec<DMatrix<f64>>,
    /// `S^[k] = W^[k] X^[k]`, rows with unit sample variance.
    pub sources: Vec<DMatrix<f64>>,
    /// `(W^[k])^-1`.
    pub mixing_est: Vec<DMatrix<f64>>,
    /// Source indices (0-based) sorted by decreasing SCV mean |r|.
    pub scv_order: Vec<usize>,
    /// Mean |r| of every SCV, indexed by source index.
    pub scv_corr: Vec<f64>,
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl IvaResult {
    pub fn order(&self) -> usize {
        self.scv_corr.len()
    }

    pub fn datasets(&self) -> usize {
        self.demixing.len()
    }
}

/// The `n`-th most correlated SCV across all datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct ScvBundle {
    /// 1-based rank after ordering.
    pub index: usize,
    /// Source row (0-based) inside each `S^[k]`.
    pub source_row: usize,
    pub rows: Vec<DVector<f64>>,
    pub mean_abs_corr: f64,
}

/// Cross-covariances `X^k X^lᵀ / R` stored as one `KN x KN` matrix.
struct CrossCov {
    big: DMatrix<f64>,
    n: usize,
}

impl CrossCov {
    fn new(x: &[DMatrix<f64>]) -> Self {
        let n = x[0].nrows();
        let r = x[0].ncols();
        let mut stacked = DMatrix::zeros(x.len() * n, r);
        for (k, xk) in x.iter().enumerate() {
            stacked.rows_mut(k * n, n).copy_from(xk);
        }
        let big = &stacked * stacked.transpose() / r as f64;
        CrossCov { big, n }
    }

    fn block(&self, k: usize, l: usize) -> nalgebra::DMatrixView<'_, f64> {
        self.big.view((k * self.n, l * self.n), (self.n, self.n))
    }
}

/// Per-SCV quantities for one set of demixing rows `w` (row `k` = `w_n^[k]`).
struct ScvState {
    /// `t[l]` stacks `R_kl w_l` over `k`, length `KN`.
    t: Vec<DVector<f64>>,
    sigma: DMatrix<f64>,
}

fn scv_state(cc: &CrossCov, w: &DMatrix<f64>) -> ScvState {
    let k_count = w.nrows();
    let n = cc.n;
    let mut t = Vec::with_capacity(k_count);
    for l in 0..k_count {
        let wl = w.row(l).transpose();
        t.push(cc.big.columns(l * n, n) * wl);
    }
    let mut sigma = DMatrix::zeros(k_count, k_count);
    for k in 0..k_count {
        let wk = w.row(k);
        for l in k..k_count {
            let v = (wk * t[l].rows(k * n, n))[(0, 0)];
            sigma[(k, l)] = v;
            sigma[(l, k)] = v;
        }
    }
    ScvState { t, sigma }
}

/// `Σ̂` alone, from the upper block triangle of the cross-covariances.
fn scv_sigma(cc: &CrossCov, w: &DMatrix<f64>) -> DMatrix<f64> {
    let k_count = w.nrows();
    let n = cc.n;
    let mut sigma = DMatrix::zeros(k_count, k_count);
    for l in 0..k_count {
        let wl = w.row(l).transpose();
        let t = cc.big.view((0, l * n), ((l + 1) * n, n)) * wl;
        for k in 0..=l {
            let v = w.row(k).dot(&t.rows(k * n, n).transpose());
            sigma[(k, l)] = v;
            sigma[(l, k)] = v;
        }
    }
    sigma
}

fn ridge_log_det(sigma: &DMatrix<f64>) -> f64 {
    let mut s = sigma.clone();
    for i in 0..s.nrows() {
        s[(i, i)] += SCV_RIDGE;
    }
    log_det_spd(&s).unwrap_or(f64::INFINITY)
}

fn rows_of(w: &[DMatrix<f64>], n: usize) -> DMatrix<f64> {
    let order = w[0].ncols();
    DMatrix::from_fn(w.len(), order, |k, j| w[k][(n, j)])
}

fn total_cost(sigmas: &[DMatrix<f64>], log_dets: &[f64]) -> f64 {
    let scv: f64 = sigmas.iter().map(|s| 0.5 * ridge_log_det(s)).sum();
    scv - log_dets.iter().sum::<f64>()
}

fn corr_from_cov(sigma: &DMatrix<f64>) -> f64 {
    let k = sigma.nrows();
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for i in 0..k {
        for j in (i + 1)..k {
            let denom = (sigma[(i, i)] * sigma[(j, j)]).sqrt();
            acc += if denom > 0.0 { (sigma[(i, j)] / denom).abs().min(1.0) } else { 0.0 };
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        acc / pairs as f64
    }
}

/// Rescales every row of every `W^[k]` so its source has unit sample variance,
/// and the SCV covariances `sigmas` along with it.
fn normalize_rows(w: &mut [DMatrix<f64>], sigmas: &mut [DMatrix<f64>]) {
    for (n, sigma) in sigmas.iter_mut().enumerate() {
        let d: Vec<f64> = (0..w.len())
            .map(|k| if sigma[(k, k)] > 0.0 { 1.0 / sigma[(k, k)].sqrt() } else { 1.0 })
            .collect();
        for (k, wk) in w.iter_mut().enumerate() {
            wk.row_mut(n).scale_mut(d[k]);
        }
        for k in 0..d.len() {
            for l in 0..d.len() {
                sigma[(k, l)] *= d[k] * d[l];
            }
        }
    }
}


fn check_inputs(x: &[DMatrix<f64>]) -> Result<(usize, usize), IvaError> {
    if x.len() < 2 {
        return Err(IvaError::TooFewDatasets(x.len()));
    }
    let (n, r) = x[0].shape();
    for (index, xk) in x.iter().enumerate() {
        if xk.shape() != (n, r) {
            return Err(IvaError::DimensionMismatch {
                index,
                rows: xk.nrows(),
                cols: xk.ncols(),
                expected_rows: n,
                expected_cols: r,
            });
        }
    }
    if r <= n {
        return Err(IvaError::TooFewSamples { samples: r, order: n });
    }
    Ok((n, r))
}

/// IVA-G over `K` observation matrices `X^[k]` (`N x R`, zero-mean rows).
///
/// Each sweep updates every SCV in turn with a block-diagonal Newton step on
/// the IVA-G cost, backtracking until the cost does not increase. Failing to
/// meet `tol` within `max_iter` sweeps returns the last iterate with
/// `converged = false`.
pub fn iva_decompose(x: &[DMatrix<f64>], opts: &IvaOptions) -> Result<IvaResult, IvaError> {
    let (order, _) = check_inputs(x)?;
    let k_count = x.len();
    let cc = CrossCov::new(x);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut w: Vec<DMatrix<f64>> = (0..k_count)
        .map(|_| DMatrix::identity(order, order) + gaussian_matrix(order, order, &mut rng) * INIT_PERTURBATION)
        .collect();
    let mut sigmas: Vec<DMatrix<f64>> = (0..order).map(|n| scv_sigma(&cc, &rows_of(&w, n))).collect();
    normalize_rows(&mut w, &mut sigmas);

    let mut cost_trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut log_dets: Vec<f64> = w.iter().map(log_abs_det).collect();

    while iterations < opts.max_iter {
        iterations += 1;
        let w_old = w.clone();
        for n in 0..order {
            let rows = rows_of(&w, n);
            let state = scv_state(&cc, &rows);
            sigmas[n] = state.sigma.clone();
            let mut sig = state.sigma.clone();
            for i in 0..k_count {
                sig[(i, i)] += SCV_RIDGE;
            }
            let (half_log_det, q) = match sig.clone().cholesky() {
                Some(ch) => {
                    let l = ch.l_dirty();
                    ((0..k_count).map(|i| l[(i, i)].ln()).sum::<f64>(), ch.inverse())
                }
                None => (f64::INFINITY, pinv(&sig, 1e-14)),
            };
            let base = half_log_det - log_dets.iter().sum::<f64>();

            let mut direction = DMatrix::zeros(k_count, order);
            let mut cofactors = Vec::with_capacity(k_count);
            for k in 0..k_count {
                let inv = w[k].clone().try_inverse().ok_or(IvaError::SingularDemixing {
                    dataset: k,
                    condition: f64::INFINITY,
                })?;
                let h = inv.column(n).into_owned();
                let mut g = -h.clone();
                for l in 0..k_count {
                    g.axpy(q[(k, l)], &state.t[l].rows(k * order, order), 1.0);
                }
                let hess = cc.block(k, k) * q[(k, k)] + &h * h.transpose();
                let step = match hess.cholesky() {
                    Some(ch) => ch.solve(&g),
                    None => g,
                };
                direction.row_mut(k).copy_from(&step.transpose());
                cofactors.push(h);
            }

            let mut mu = 1.0;
            for _ in 0..MAX_HALVINGS {
                let trial = &rows - &direction * mu;
                // det W with row n replaced by v equals det W · (v · W⁻¹[:, n]).
                let trial_dets: Vec<f64> = (0..k_count)
                    .map(|k| log_dets[k] + (trial.row(k) * &cofactors[k])[(0, 0)].abs().ln())
                    .collect();
                let trial_sigma = scv_sigma(&cc, &trial);
                let cost = 0.5 * ridge_log_det(&trial_sigma) - trial_dets.iter().sum::<f64>();
                if cost.is_finite() && cost <= base {
                    sigmas[n] = trial_sigma;
                    for (k, wk) in w.iter_mut().enumerate() {
                        wk.row_mut(n).copy_from(&trial.row(k));
                    }
                    log_dets = trial_dets;
                    break;
                }
                mu *= 0.5;
            }
        }
        normalize_rows(&mut w, &mut sigmas);
        log_dets = w.iter().map(log_abs_det).collect();
        let cost = total_cost(&sigmas, &log_dets);
        cost_trace.push(cost);

        let change = w
            .iter()
            .zip(&w_old)
            .map(|(a, b)| (a - b).norm() / b.norm())
            .fold(0.0, f64::max);
        debug!("iva sweep {iterations}: cost {:.8e}, change {change:.3e}", cost_trace.last().unwrap());
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("IVA stopped after {iterations} sweeps without reaching tol {:e}", opts.tol);
    }

    for (dataset, wk) in w.iter().enumerate() {
        let condition = condition_number(wk);
        if !(condition <= MAX_CONDITION) {
            return Err(IvaError::SingularDemixing { dataset, condition });
        }
    }

    let sources: Vec<DMatrix<f64>> = w.iter().zip(x).map(|(wk, xk)| wk * xk).collect();
    let mixing_est: Vec<DMatrix<f64>> = w
        .iter()
        .enumerate()
        .map(|(k, wk)| {
            wk.clone().try_inverse().ok_or(IvaError::SingularDemixing {
                dataset: k,
                condition: f64::INFINITY,
            })
        })
        .collect::<Result<_, _>>()?;
    let scv_corr: Vec<f64> = (0..order)
        .map(|n| corr_from_cov(&scv_sigma(&cc, &rows_of(&w, n))))
        .collect();
    let mut scv_order: Vec<usize> = (0..order).collect();
    scv_order.sort_by(|&a, &b| scv_corr[b].total_cmp(&scv_corr[a]));

    Ok(IvaResult {
        demixing: w,
        sources,
        mixing_est,
        scv_order,
        scv_corr,
        cost_trace,
        iterations,
        converged,
    })
}

/// The `n`-th SCV (1-based) in decreasing order of mean |r|.
pub fn extract_scv(result: &IvaResult, n: usize) -> Result<ScvBundle, IvaError> {
    let order = result.order();
    if n == 0 || n > order {
        return Err(IvaError::IndexOutOfRange { index: n, order });
    }
    let source_row = result.scv_order[n - 1];
    let rows = result
        .sources
        .iter()
        .map(|s| s.row(source_row).transpose())
        .collect();
    Ok(ScvBundle {
        index: n,
        source_row,
        rows,
        mean_abs_corr: result.scv_corr[source_row],
    })
}

/// Back-reconstructed mixing matrices `A^[k] = D^[k]+ Â^[k]` (`MC x N`).
///
/// A square invertible reduction matrix is inverted exactly.
pub fn reconstruct_mixing(result: &IvaResult, reductions: &[PcaReduction]) -> Result<Vec<DMatrix<f64>>, IvaError> {
    if reductions.len() != result.datasets() {
        return Err(IvaError::ShapeMismatch(format!(
            "{} reductions for {} datasets",
            reductions.len(),
            result.datasets()
        )));
    }
    result
        .mixing_est
        .iter()
        .zip(reductions)
        .map(|(a_hat, red)| {
            let d = &red.reduction_matrix;
            if d.nrows() != a_hat.nrows() {
                return Err(IvaError::ShapeMismatch(format!(
                    "model `{}`: reduction has order {}, mixing has order {}",
                    red.model_id,
                    d.nrows(),
                    a_hat.nrows()
                )));
            }
            let d_inv = if d.is_square() {
                d.clone().try_inverse().unwrap_or_else(|| pinv(d, RANK_RTOL))
            } else {
                pinv(d, RANK_RTOL)
            };
            Ok(d_inv * a_hat)
        })
        .collect()
}

/// Joint inter-symbol interference of the global systems `G^[k] = W^[k] A^[k]`.
///
/// Zero when every `G^[k]` is a scaled permutation, sharing one permutation.
pub fn joint_isi(demixing: &[DMatrix<f64>], mixing: &[DMatrix<f64>]) -> f64 {
    assert_eq!(demixing.len(), mixing.len());
    let n = demixing[0].nrows();
    let mut g = DMatrix::<f64>::zeros(n, n);
    for (w, a) in demixing.iter().zip(mixing) {
        g += (w * a).abs();
    }
    if n < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let row = g.row(i);
        acc += row.sum() / row.max() - 1.0;
    }
    for j in 0..n {
        let col = g.column(j);
        acc += col.sum() / col.max() - 1.0;
    }
    acc / (2.0 * n as f64 * (n as f64 - 1.0))
}
