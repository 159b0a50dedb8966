//! Correlation significance, backdoor verdicts and evaluation metrics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use thiserror::Error;

use crate::linalg::pearson;
use crate::zoo::{Label, Split, ZooManifest};

pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum StatsError {
    #[error("source vector of model `{0}` has zero variance")]
    ZeroVariance(String),

    #[error("need at least 3 samples per vector, got {0}")]
    TooFewSamples(usize),

    #[error("vector of model `{model_id}` has length {len}, expected {expected}")]
    LengthMismatch { model_id: String, len: usize, expected: usize },

    #[error("no training model is labeled backdoor")]
    NoBackdoorReference,

    #[error("{what}: expected {expected} entries, got {found}")]
    SizeMismatch { what: &'static str, expected: usize, found: usize },

    #[error("no labeled models to evaluate")]
    EmptyEvaluation,

    #[error("ROC-AUC needs both positive and negative labels")]
    SingleClassOnly,
}

/// Multiplicity used by the Bonferroni correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Multiplicity {
    /// `m = K(K-1)/2`, all distinct pairs.
    #[default]
    AllPairs,
    /// `m = K-1`, the tests in one row.
    PerRow,
}

impl Multiplicity {
    pub fn count(self, k: usize) -> f64 {
        match self {
            Multiplicity::AllPairs => (k * k.saturating_sub(1) / 2) as f64,
            Multiplicity::PerRow => k.saturating_sub(1) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    #[serde(serialize_with = "matrix_rows")]
    pub r: DMatrix<f64>,
    #[serde(serialize_with = "matrix_rows")]
    pub p_raw: DMatrix<f64>,
    #[serde(serialize_with = "matrix_rows")]
    pub p_adj: DMatrix<f64>,
    #[serde(serialize_with = "matrix_rows")]
    pub significant: DMatrix<bool>,
    /// Sample size entering the t-test.
    pub sample_size: usize,
    pub alpha: f64,
}

impl CorrelationReport {
    pub fn len(&self) -> usize {
        self.r.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn significant_pairs(&self) -> usize {
        let k = self.len();
        let mut count = 0;
        for i in 0..k {
            for j in (i + 1)..k {
                count += self.significant[(i, j)] as usize;
            }
        }
        count
    }
}

/// Serializes a matrix as a list of rows.
pub fn matrix_rows<T, S>(m: &DMatrix<T>, ser: S) -> Result<S::Ok, S::Error>
where
    T: nalgebra::Scalar + Serialize,
    S: serde::Serializer,
{
    use serde::ser::SerializeSeq;
    let mut seq = ser.serialize_seq(Some(m.nrows()))?;
    for i in 0..m.nrows() {
        let row: Vec<&T> = (0..m.ncols()).map(|j| &m[(i, j)]).collect();
        seq.serialize_element(&row)?;
    }
    seq.end()
}

/// `K x K` Pearson correlations of equal-length vectors; the diagonal is 1.
pub fn correlation_matrix(ids: &[String], vectors: &[DVector<f64>]) -> Result<DMatrix<f64>, StatsError> {
    if ids.len() != vectors.len() {
        return Err(StatsError::SizeMismatch {
            what: "model ids",
            expected: vectors.len(),
            found: ids.len(),
        });
    }
    let k = vectors.len();
    let len = vectors.first().map_or(0, |v| v.len());
    if len < 3 {
        return Err(StatsError::TooFewSamples(len));
    }
    let mut centered: Vec<DVector<f64>> = Vec::with_capacity(k);
    for (id, v) in ids.iter().zip(vectors) {
        if v.len() != len {
            return Err(StatsError::LengthMismatch {
                model_id: id.clone(),
                len: v.len(),
                expected: len,
            });
        }
        let c = v.add_scalar(-v.mean());
        let norm = c.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(StatsError::ZeroVariance(id.clone()));
        }
        centered.push(c / norm);
    }
    let mut r = DMatrix::identity(k, k);
    for i in 0..k {
        for j in (i + 1)..k {
            let v = centered[i].dot(&centered[j]).clamp(-1.0, 1.0);
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    Ok(r)
}

/// Two-tailed p-value of a Pearson `r` from `n` samples (`n - 2` degrees of freedom).
pub fn correlation_p_value(r: f64, n: usize) -> f64 {
    assert!(n > 2, "t-test on a correlation needs n > 2");
    let r2 = r * r;
    if r2 >= 1.0 {
        return 0.0;
    }
    if r == 0.0 {
        return 1.0;
    }
    let df = (n - 2) as f64;
    // P(|T| > t) = I_{df/(df+t²)}(df/2, 1/2) and df/(df+t²) = 1 - r².
    beta_reg(df / 2.0, 0.5, 1.0 - r2).clamp(0.0, 1.0)
}

/// Raw p-values of every off-diagonal pair; the diagonal is 0.
pub fn correlation_significance(r: &DMatrix<f64>, sample_size: usize) -> DMatrix<f64> {
    let k = r.nrows();
    DMatrix::from_fn(k, k, |i, j| if i == j { 0.0 } else { correlation_p_value(r[(i, j)], sample_size) })
}

/// Bonferroni-adjusted p-values and the mask `p_adj < alpha` (diagonal false).
pub fn bonferroni_adjust(p_raw: &DMatrix<f64>, alpha: f64, multiplicity: Multiplicity) -> (DMatrix<f64>, DMatrix<bool>) {
    let k = p_raw.nrows();
    let m = multiplicity.count(k).max(1.0);
    let p_adj = p_raw.map(|p| (p * m).min(1.0));
    let mask = DMatrix::from_fn(k, k, |i, j| i != j && p_adj[(i, j)] < alpha);
    (p_adj, mask)
}

/// Correlation, significance and correction in one step.
pub fn correlation_report(
    ids: &[String],
    vectors: &[DVector<f64>],
    sample_size: usize,
    alpha: f64,
    multiplicity: Multiplicity,
) -> Result<CorrelationReport, StatsError> {
    let r = correlation_matrix(ids, vectors)?;
    if sample_size < 3 {
        return Err(StatsError::TooFewSamples(sample_size));
    }
    let p_raw = correlation_significance(&r, sample_size);
    let (p_adj, significant) = bonferroni_adjust(&p_raw, alpha, multiplicity);
    Ok(CorrelationReport {
        r,
        p_raw,
        p_adj,
        significant,
        sample_size,
        alpha,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Backdoor,
    Clean,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Backdoor => "backdoor",
            Verdict::Clean => "clean",
        })
    }
}

/// Per-model decision against the training backdoor references.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelDecision {
    pub verdict: Verdict,
    /// Max |r| against any reference other than the model itself.
    pub score: f64,
    /// Signed correlation with the strongest reference.
    pub max_ref_corr: f64,
    /// Smallest adjusted p-value against any reference.
    pub min_adj_p: f64,
}

/// Flags a model when it correlates significantly with at least one training backdoor model.
pub fn decide(report: &CorrelationReport, manifest: &ZooManifest) -> Result<Vec<ModelDecision>, StatsError> {
    let k = report.len();
    if manifest.len() != k {
        return Err(StatsError::SizeMismatch {
            what: "manifest models",
            expected: k,
            found: manifest.len(),
        });
    }
    let refs: Vec<usize> = (0..k).filter(|&j| manifest.models[j].is_backdoor_reference()).collect();
    if refs.is_empty() {
        return Err(StatsError::NoBackdoorReference);
    }
    Ok((0..k)
        .map(|i| {
            let mut flagged = false;
            let mut score = 0.0;
            let mut max_ref_corr = 0.0;
            let mut min_adj_p = 1.0f64;
            for &j in refs.iter().filter(|&&j| j != i) {
                flagged |= report.significant[(i, j)];
                let r = report.r[(i, j)];
                if r.abs() > score {
                    score = r.abs();
                    max_ref_corr = r;
                }
                min_adj_p = min_adj_p.min(report.p_adj[(i, j)]);
            }
            ModelDecision {
                verdict: if flagged { Verdict::Backdoor } else { Verdict::Clean },
                score,
                max_ref_corr,
                min_adj_p,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, truth_backdoor: bool, flagged: bool) {
        match (truth_backdoor, flagged) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }
}

/// Confusion over test models with a known label.
pub fn confusion(decisions: &[ModelDecision], manifest: &ZooManifest) -> Confusion {
    let mut c = Confusion::default();
    for (d, m) in decisions.iter().zip(&manifest.models) {
        if m.split != Split::Test || m.label == Label::Unknown {
            continue;
        }
        c.record(m.label == Label::Backdoor, d.verdict == Verdict::Backdoor);
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub accuracy: f64,
}

pub fn compute_metrics(c: &Confusion) -> Result<Metrics, StatsError> {
    let total = c.total();
    if total == 0 {
        return Err(StatsError::EmptyEvaluation);
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(Metrics {
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
        accuracy: (c.tp + c.tn) as f64 / total as f64,
    })
}

/// Normal-approximation half-width `z · sqrt(acc (1 - acc) / n)`.
pub fn binomial_ci(accuracy: f64, n: usize, z: f64) -> f64 {
    assert!((0.0..=1.0).contains(&accuracy), "accuracy {accuracy} outside [0, 1]");
    assert!(n >= 1, "binomial_ci needs n >= 1");
    z * (accuracy * (1.0 - accuracy) / n as f64).sqrt()
}

/// Area under the ROC curve as the Mann-Whitney probability that a positive outscores a negative.
pub fn roc_auc(scores: &[f64], truth: &[bool]) -> Result<f64, StatsError> {
    if scores.len() != truth.len() {
        return Err(StatsError::SizeMismatch {
            what: "truth labels",
            expected: scores.len(),
            found: truth.len(),
        });
    }
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(StatsError::SingleClassOnly);
    }
    // Midranks handle ties as one half.
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            ranks[t] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(truth).filter(|(_, &t)| t).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Pearson correlation of two slices, `None` on zero variance.
pub fn pearson_r(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(a, b)
}
