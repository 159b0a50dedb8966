//! End-to-end detection: features, decomposition, correlation decoding, clustering.

use std::path::Path;
use std::time::{Duration, Instant};

use log::info;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{iva_contributions, kmeans2, parafac2_contributions, ClusterError, ClusterReport, ContributionMatrix, KMeansOptions, Method};
use crate::features::{effective_sample_size, project_zoo, FeatureMatrix, RpConfig, Scaling};
use crate::iva::{extract_scv, iva_decompose, pca_reduce, reconstruct_mixing, IvaError, IvaOptions, PcaReduction};
use crate::parafac2::{parafac2_als, parafac2_sources, Parafac2Error, Parafac2Options};
use crate::stats::{
    binomial_ci, compute_metrics, confusion, correlation_report, decide, roc_auc, Confusion, CorrelationReport, Metrics,
    ModelDecision, Multiplicity, StatsError, DEFAULT_ALPHA,
};
use crate::zoo::{load_manifest, load_zoo, ActivationSet, IngestError, Label, Split, ZooManifest};

#[derive(Error, Debug)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Iva(#[from] IvaError),
    #[error(transparent)]
    Parafac2(#[from] Parafac2Error),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("{0} activation sets for {1} manifest entries")]
    ZooMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectOptions {
    pub method: Method,
    pub rp: RpConfig,
    pub scaling: Scaling,
    /// Model order `N` for PCA/IVA and the PARAFAC2 rank.
    pub order: usize,
    /// Retained-variance level below which PCA warns.
    pub min_variance: f64,
    pub iva: IvaOptions,
    pub parafac2: Parafac2Options,
    pub alpha: f64,
    pub multiplicity: Multiplicity,
    pub kmeans: KMeansOptions,
    pub z: f64,
}

impl Default for DetectOptions {
    fn default() -> Self {
        DetectOptions {
            method: Method::Parafac2,
            rp: RpConfig::default(),
            scaling: Scaling::UnitRms,
            order: 10,
            min_variance: 0.9,
            iva: IvaOptions::default(),
            parafac2: Parafac2Options::default(),
            alpha: DEFAULT_ALPHA,
            multiplicity: Multiplicity::AllPairs,
            kmeans: KMeansOptions::default(),
            z: 1.96,
        }
    }
}

impl DetectOptions {
    /// Same options with every seed derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rp.seed = seed;
        self.iva.seed = seed;
        self.parafac2.seed = seed;
        self.kmeans.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum Diagnostics {
    Iva {
        order: usize,
        iterations: usize,
        converged: bool,
        final_cost: f64,
        scv1_mean_abs_corr: f64,
        explained_variance: Vec<f64>,
        cost_trace: Vec<f64>,
    },
    Parafac2 {
        rank: usize,
        iterations: usize,
        converged: bool,
        fit: f64,
        constraint_drift: f64,
        fit_trace: Vec<f64>,
    },
}

impl Diagnostics {
    pub fn converged(&self) -> bool {
        match self {
            Diagnostics::Iva { converged, .. } | Diagnostics::Parafac2 { converged, .. } => *converged,
        }
    }
}

/// Per-model row of the detection output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelOutcome {
    pub model_id: String,
    pub split: Split,
    pub truth: Label,
    #[serde(flatten)]
    pub decision: ModelDecision,
    pub cluster: usize,
    pub contribution: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionReport {
    pub method: Method,
    pub options: DetectOptions,
    pub models: Vec<ModelOutcome>,
    pub correlation: CorrelationReport,
    /// Confusion over labeled test models.
    pub confusion: Confusion,
    pub metrics: Option<Metrics>,
    pub ci_halfwidth: Option<f64>,
    pub roc_auc: Option<f64>,
    pub clustering: ClusterReport,
    pub diagnostics: Diagnostics,
}

impl DetectionReport {
    pub fn converged(&self) -> bool {
        self.diagnostics.converged()
    }

    pub fn accuracy(&self) -> Option<f64> {
        self.metrics.map(|m| m.accuracy)
    }
}

/// Wall-clock per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub ingest: Duration,
    pub features: Duration,
    pub decomposition: Duration,
    pub stats: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.ingest + self.features + self.decomposition + self.stats
    }
}

/// Output of the decomposition stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposed {
    /// Leading source vector of every model, in manifest order.
    pub vectors: Vec<DVector<f64>>,
    pub contributions: ContributionMatrix,
    pub diagnostics: Diagnostics,
}

/// Whitened reductions of every model; the order drops to the smallest numerical rank if needed.
pub fn reduce_zoo(features: &[FeatureMatrix], order: usize, min_variance: f64) -> Result<Vec<PcaReduction>, IvaError> {
    use rayon::prelude::*;
    let mut n = order;
    loop {
        let out: Result<Vec<PcaReduction>, IvaError> =
            features.par_iter().map(|b| pca_reduce(b, n, min_variance)).collect();
        match out {
            Err(IvaError::OrderExceedsRank { model_id, rank, .. }) if rank >= 1 && rank < n => {
                info!("model `{model_id}` has numerical rank {rank}; reducing order from {n} to {rank}");
                n = rank;
            }
            other => return other,
        }
    }
}

fn run_iva(features: &[FeatureMatrix], opts: &DetectOptions) -> Result<Decomposed, PipelineError> {
    let reductions = reduce_zoo(features, opts.order, opts.min_variance)?;
    let x: Vec<_> = reductions.iter().map(|r| r.reduced.clone()).collect();
    let result = iva_decompose(&x, &opts.iva)?;
    let scv = extract_scv(&result, 1)?;
    let mixing = reconstruct_mixing(&result, &reductions)?;
    let contributions = iva_contributions(&result, &mixing)?;
    let diagnostics = Diagnostics::Iva {
        order: result.order(),
        iterations: result.iterations,
        converged: result.converged,
        final_cost: result.cost_trace.last().copied().unwrap_or(f64::NAN),
        scv1_mean_abs_corr: scv.mean_abs_corr,
        explained_variance: reductions.iter().map(|r| r.explained_variance).collect(),
        cost_trace: result.cost_trace.clone(),
    };
    Ok(Decomposed {
        vectors: scv.rows,
        contributions,
        diagnostics,
    })
}

fn run_parafac2(features: &[FeatureMatrix], opts: &DetectOptions) -> Result<Decomposed, PipelineError> {
    let result = parafac2_als(features, opts.order, &opts.parafac2)?;
    let vectors = parafac2_sources(&result, 1)?;
    let contributions = parafac2_contributions(&result)?;
    let diagnostics = Diagnostics::Parafac2 {
        rank: result.rank(),
        iterations: result.iterations,
        converged: result.converged,
        fit: result.fit,
        constraint_drift: result.constraint_drift(),
        fit_trace: result.fit_trace.clone(),
    };
    Ok(Decomposed {
        vectors,
        contributions,
        diagnostics,
    })
}

/// Decomposes projected features with the configured method.
pub fn decompose_features(features: &[FeatureMatrix], opts: &DetectOptions) -> Result<Decomposed, PipelineError> {
    match opts.method {
        Method::Iva => run_iva(features, opts),
        Method::Parafac2 => run_parafac2(features, opts),
    }
}

/// Projects and decomposes a zoo.
pub fn decompose(sets: &[ActivationSet], opts: &DetectOptions) -> Result<Decomposed, PipelineError> {
    decompose_features(&project_zoo(sets, &opts.rp, opts.scaling), opts)
}

/// Correlation report of the leading sources, with the t-test sample size set from the zoo.
pub fn correlate(ids: &[String], sets: &[ActivationSet], dec: &Decomposed, opts: &DetectOptions) -> Result<CorrelationReport, PipelineError> {
    let min_width = sets.iter().map(|s| s.width).min().unwrap_or(0);
    let n_eff = effective_sample_size(&opts.rp, min_width);
    Ok(correlation_report(ids, &dec.vectors, n_eff, opts.alpha, opts.multiplicity)?)
}

/// Runs detection on activation sets already in memory (in manifest order).
pub fn detect(manifest: &ZooManifest, sets: &[ActivationSet], opts: &DetectOptions) -> Result<(DetectionReport, StageTimings), PipelineError> {
    if sets.len() != manifest.len() {
        return Err(PipelineError::ZooMismatch(sets.len(), manifest.len()));
    }
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let features = project_zoo(sets, &opts.rp, opts.scaling);
    timings.features = t.elapsed();

    let t = Instant::now();
    let dec = decompose_features(&features, opts)?;
    timings.decomposition = t.elapsed();

    let t = Instant::now();
    let correlation = correlate(&manifest.ids(), sets, &dec, opts)?;
    let decisions = decide(&correlation, manifest)?;
    let conf = confusion(&decisions, manifest);
    let metrics = compute_metrics(&conf).ok();
    let ci_halfwidth = metrics.map(|m| binomial_ci(m.accuracy, conf.total(), opts.z));

    let (mut scores, mut truth) = (Vec::new(), Vec::new());
    for (d, m) in decisions.iter().zip(&manifest.models) {
        if m.split == Split::Test && m.label != Label::Unknown {
            scores.push(d.score);
            truth.push(m.label == Label::Backdoor);
        }
    }
    let auc = roc_auc(&scores, &truth).ok();
    let suspicion: Vec<f64> = decisions.iter().map(|d| d.score).collect();
    let clustering = kmeans2(&dec.contributions.points, Some(&suspicion), &opts.kmeans)?;
    timings.stats = t.elapsed();

    let models = manifest
        .models
        .iter()
        .zip(decisions)
        .enumerate()
        .map(|(k, (m, decision))| ModelOutcome {
            model_id: m.id.clone(),
            split: m.split,
            truth: m.label,
            decision,
            cluster: clustering.assignments[k],
            contribution: dec.contributions.points[k],
        })
        .collect();

    let report = DetectionReport {
        method: opts.method,
        options: *opts,
        models,
        correlation,
        confusion: conf,
        metrics,
        ci_halfwidth,
        roc_auc: auc,
        clustering,
        diagnostics: dec.diagnostics,
    };
    Ok((report, timings))
}

/// Loads a manifest and its activations, then runs [`detect`].
pub fn detect_path(manifest_path: &Path, opts: &DetectOptions) -> Result<(DetectionReport, StageTimings), PipelineError> {
    let t = Instant::now();
    let manifest = load_manifest(manifest_path)?;
    let sets = load_zoo(&manifest)?;
    let ingest = t.elapsed();
    let (report, mut timings) = detect(&manifest, &sets, opts)?;
    timings.ingest = ingest;
    Ok((report, timings))
}
