//! Synthetic zoos in which backdoored models share a planted activation subspace.
//!
//! Clean activations are i.i.d. `N(0, 1)`. A backdoored model adds
//! `Z · diag(g_k) · U` on its first `d_min` neurons, where the latent
//! `Z ∈ ℝ^(MC × shared_dim)` and the neuron pattern `U ∈ ℝ^(shared_dim × d_min)`
//! are common to the zoo and the gains `g_k` are drawn per model. The term is
//! scaled so its energy is `10^(snr_db/10)` times the expected noise energy.
//!
//! The construction exercises the detection pipeline end to end; it says
//! nothing about whether real backdoored networks behave this way.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::gaussian_matrix;
use crate::zoo::{write_activations, write_manifest, ActivationSet, IngestError, Label, ModelEntry, Split, ZooManifest};

#[derive(Error, Debug)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    SpecViolation(String),

    #[error(transparent)]
    Ingest(#[from] IngestError),

    #[error("i/o failure on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub models: usize,
    pub backdoor_fraction: f64,
    pub exemplars: usize,
    pub classes: usize,
    pub d_min: usize,
    pub d_max: usize,
    pub shared_dim: usize,
    pub snr_db: f64,
    /// Half-width of the uniform per-model gain around 1.
    pub gain_jitter: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            models: 60,
            backdoor_fraction: 0.5,
            exemplars: 10,
            classes: 10,
            d_min: 64,
            d_max: 512,
            shared_dim: 5,
            snr_db: 0.0,
            gain_jitter: 0.1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::SpecViolation(msg));
        if self.models < 2 {
            return bad(format!("need at least 2 models, got {}", self.models));
        }
        if !(0.0..=1.0).contains(&self.backdoor_fraction) {
            return bad(format!("backdoor_fraction {} outside [0, 1]", self.backdoor_fraction));
        }
        if self.exemplars < 2 || self.classes < 2 {
            return bad(format!("exemplar grid {}x{} must be at least 2x2", self.exemplars, self.classes));
        }
        if self.shared_dim < 1 {
            return bad("shared_dim must be at least 1".into());
        }
        if self.d_min < self.shared_dim {
            return bad(format!("d_min {} below shared_dim {}", self.d_min, self.shared_dim));
        }
        if self.d_max < self.d_min {
            return bad(format!("d_max {} below d_min {}", self.d_max, self.d_min));
        }
        if !self.snr_db.is_finite() {
            return bad("snr_db must be finite".into());
        }
        if !(0.0..1.0).contains(&self.gain_jitter) {
            return bad(format!("gain_jitter {} outside [0, 1)", self.gain_jitter));
        }
        Ok(())
    }

    pub fn backdoor_count(&self) -> usize {
        (self.models as f64 * self.backdoor_fraction).round() as usize
    }
}

/// Generator-side record of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub model_id: String,
    pub label: Label,
    pub split: Split,
    pub width: usize,
    pub signal_energy: f64,
    pub noise_energy: f64,
}

impl TruthRecord {
    /// Realized SNR in dB; `-inf` for clean models.
    pub fn empirical_snr_db(&self) -> f64 {
        10.0 * (self.signal_energy / self.noise_energy).log10()
    }
}

#[derive(Debug, Clone)]
pub struct SynthZoo {
    pub manifest: ZooManifest,
    pub sets: Vec<ActivationSet>,
    pub truth: Vec<TruthRecord>,
}

fn model_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Builds a zoo in memory. Backdoored models come first; within each group
/// models alternate train/test, starting with train. Entry paths are
/// `models/<id>.atf`, relative to wherever the zoo is written.
pub fn generate_zoo(spec: &SynthSpec) -> Result<SynthZoo, SynthError> {
    spec.validate()?;
    let rows = spec.exemplars * spec.classes;
    let n_backdoor = spec.backdoor_count();

    let mut shared = model_rng(spec.seed, 0);
    let latent = gaussian_matrix(rows, spec.shared_dim, &mut shared);
    let pattern = gaussian_matrix(spec.shared_dim, spec.d_min, &mut shared);
    let snr = 10f64.powf(spec.snr_db / 10.0);

    let generated: Vec<(ActivationSet, TruthRecord)> = (0..spec.models)
        .into_par_iter()
        .map(|k| {
            let backdoor = k < n_backdoor;
            let pos = if backdoor { k } else { k - n_backdoor };
            let split = if pos % 2 == 0 { Split::Train } else { Split::Test };
            let label = if backdoor { Label::Backdoor } else { Label::Clean };
            let model_id = format!("model_{k:03}");

            let mut rng = model_rng(spec.seed, k as u64 + 1);
            let width = rng.random_range(spec.d_min..=spec.d_max);
            let gains: Vec<f64> = (0..spec.shared_dim)
                .map(|_| 1.0 + spec.gain_jitter * rng.random_range(-1.0..=1.0))
                .collect();
            let noise = DMatrix::<f64>::from_fn(rows, width, |_, _| rng.sample(StandardNormal));
            let noise_energy = noise.norm_squared();
            let mut values = noise;
            let mut signal_energy = 0.0;
            if backdoor {
                let mut embed = pattern.clone();
                for (i, g) in gains.iter().enumerate() {
                    embed.row_mut(i).scale_mut(*g);
                }
                let raw = &latent * embed;
                let target = snr * (rows * width) as f64;
                let signal = &raw * (target / raw.norm_squared()).sqrt();
                signal_energy = signal.norm_squared();
                let mut block = values.columns_mut(0, spec.d_min);
                block += signal;
            }
            let mut data = Vec::with_capacity(rows * width);
            for r in 0..rows {
                data.extend(values.row(r).iter().map(|&v| v as f32));
            }
            let set = ActivationSet::new(model_id.clone(), spec.exemplars, spec.classes, width, data)
                .expect("generator produces finite, well-shaped data");
            let truth = TruthRecord {
                model_id,
                label,
                split,
                width,
                signal_energy,
                noise_energy,
            };
            (set, truth)
        })
        .collect();

    let (sets, truth): (Vec<_>, Vec<_>) = generated.into_iter().unzip();
    let models = truth
        .iter()
        .map(|t| ModelEntry {
            id: t.model_id.clone(),
            path: PathBuf::from("models").join(format!("{}.atf", t.model_id)),
            label: t.label,
            split: t.split,
            arch: "synthetic".into(),
        })
        .collect();
    let manifest = ZooManifest::new(
        models,
        spec.exemplars,
        spec.classes,
        format!(
            "synthetic zoo: K={} backdoor={} snr_db={} shared_dim={} seed={}",
            spec.models, n_backdoor, spec.snr_db, spec.shared_dim, spec.seed
        ),
    )?;
    Ok(SynthZoo { manifest, sets, truth })
}

/// Writes `manifest.json`, `models/*.atf` and `truth.csv` under `dir`; returns the manifest path.
pub fn write_zoo(zoo: &SynthZoo, dir: &Path) -> Result<PathBuf, SynthError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SynthError::Io { path, source }
    };
    let models_dir = dir.join("models");
    fs::create_dir_all(&models_dir).map_err(io(&models_dir))?;
    let mut manifest = zoo.manifest.clone();
    for (entry, set) in manifest.models.iter_mut().zip(&zoo.sets) {
        entry.path = dir.join(&entry.path);
        write_activations(set, &entry.path)?;
    }
    let manifest_path = dir.join("manifest.json");
    write_manifest(&manifest, &manifest_path)?;

    let truth_path = dir.join("truth.csv");
    let mut out = String::from("model_id,label,split,width,signal_energy,noise_energy\n");
    for t in &zoo.truth {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            t.model_id, t.label, t.split, t.width, t.signal_energy, t.noise_energy
        ));
    }
    fs::write(&truth_path, out).map_err(io(&truth_path))?;
    Ok(manifest_path)
}
