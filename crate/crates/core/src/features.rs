//! Random projection of variable-width activations to `MC x R` feature matrices.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::zoo::ActivationSet;

/// Default projected width.
pub const DEFAULT_RP_DIM: usize = 500;

// Separates per-model projection streams from the shared per-coordinate ones.
const PER_MODEL_DOMAIN: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RpScheme {
    /// Entries drawn from N(0, 1/R).
    Gaussian,
    /// Achlioptas entries: ±sqrt(3/R) with probability 1/6 each, else 0.
    SparseSign,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RpConfig {
    pub target_dim: usize,
    pub seed: u64,
    pub scheme: RpScheme,
    /// When true every model uses the same projection: row `i` of the matrix is a
    /// function of `(seed, i)` only, so a model of width `d` uses the first `d` rows.
    /// When false each model draws an independent matrix keyed by `(seed, model index)`.
    pub shared: bool,
}

impl Default for RpConfig {
    fn default() -> Self {
        RpConfig {
            target_dim: DEFAULT_RP_DIM,
            seed: 0,
            scheme: RpScheme::Gaussian,
            shared: true,
        }
    }
}

/// How a projected matrix is scaled after column centering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// Column centering only.
    Center,
    /// Centering, then the whole matrix is divided by its root-mean-square entry.
    UnitRms,
    /// Per-column z-scores.
    Standardize,
}

/// Projected features `B` of one model, `MC x R`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub model_id: String,
    pub data: DMatrix<f64>,
    /// Activation width `d` before projection.
    pub source_dim: usize,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    /// Removes the mean of every column.
    pub fn center_columns(&mut self) {
        for mut col in self.data.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
    }

    /// Centers and scales each column to unit (population) variance. Constant columns stay zero.
    pub fn standardize_columns(&mut self) {
        for mut col in self.data.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
            let var = col.norm_squared() / col.len() as f64;
            if var > 0.0 {
                col /= var.sqrt();
            }
        }
    }

    /// Divides the matrix by its RMS entry (no-op on an all-zero matrix).
    pub fn scale_unit_rms(&mut self) {
        let rms = (self.data.norm_squared() / self.data.len() as f64).sqrt();
        if rms > 0.0 {
            self.data /= rms;
        }
    }

    pub fn apply(&mut self, scaling: Scaling) {
        match scaling {
            Scaling::Center => self.center_columns(),
            Scaling::UnitRms => {
                self.center_columns();
                self.scale_unit_rms();
            }
            Scaling::Standardize => self.standardize_columns(),
        }
    }
}

/// `M x C x d` activations as an `MC x d` matrix; row `m * C + c` holds exemplar `m` of class `c`.
pub fn flatten_order(set: &ActivationSet) -> DMatrix<f64> {
    DMatrix::from_fn(set.rows(), set.width, |row, j| set.data()[row * set.width + j] as f64)
}

/// Inverse of [`flatten_order`]: back to the flat `M x C x d` value order.
pub fn unflatten(matrix: &DMatrix<f64>, exemplars: usize, classes: usize) -> Vec<f64> {
    assert_eq!(matrix.nrows(), exemplars * classes);
    let mut out = Vec::with_capacity(matrix.len());
    for row in 0..matrix.nrows() {
        out.extend(matrix.row(row).iter().copied());
    }
    out
}

fn draw_entry(rng: &mut ChaCha8Rng, scheme: RpScheme, target_dim: usize) -> f64 {
    let r = target_dim as f64;
    match scheme {
        RpScheme::Gaussian => rng.sample::<f64, _>(StandardNormal) / r.sqrt(),
        RpScheme::SparseSign => {
            let u: f64 = rng.random();
            let mag = (3.0 / r).sqrt();
            if u < 1.0 / 6.0 {
                mag
            } else if u < 2.0 / 6.0 {
                -mag
            } else {
                0.0
            }
        }
    }
}

/// The `d x R` projection matrix used for model `model_index` of width `d`.
pub fn projection_matrix(cfg: &RpConfig, width: usize, model_index: usize) -> DMatrix<f64> {
    let r = cfg.target_dim;
    let mut p = DMatrix::zeros(width, r);
    if cfg.shared {
        for i in 0..width {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            for j in 0..r {
                p[(i, j)] = draw_entry(&mut rng, cfg.scheme, r);
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ PER_MODEL_DOMAIN);
        rng.set_stream(model_index as u64);
        for i in 0..width {
            for j in 0..r {
                p[(i, j)] = draw_entry(&mut rng, cfg.scheme, r);
            }
        }
    }
    p
}

/// Projects one model's activations to `MC x R` and centers the columns.
///
/// No shortcut is taken when `d == R`; the projection is always applied.
pub fn project(set: &ActivationSet, cfg: &RpConfig, model_index: usize) -> FeatureMatrix {
    assert!(cfg.target_dim >= 1, "projection width must be positive");
    let flat = flatten_order(set);
    let p = projection_matrix(cfg, set.width, model_index);
    let mut fm = FeatureMatrix {
        model_id: set.model_id.clone(),
        data: flat * p,
        source_dim: set.width,
    };
    fm.center_columns();
    fm
}

/// Projects every model of a zoo; models are processed in parallel, output keeps input order.
pub fn project_zoo(sets: &[ActivationSet], cfg: &RpConfig, scaling: Scaling) -> Vec<FeatureMatrix> {
    use rayon::prelude::*;
    sets.par_iter()
        .enumerate()
        .map(|(k, set)| {
            let mut fm = project(set, cfg, k);
            fm.apply(scaling);
            fm
        })
        .collect()
}

/// Number of effectively independent samples along the projected axis.
///
/// Under a shared projection the correlation of two independent projected
/// vectors has variance near `1/d + 1/R`, so this is `floor(1 / (1/R + 1/d_min))`.
/// Per-model projections give `R`.
pub fn effective_sample_size(cfg: &RpConfig, min_width: usize) -> usize {
    let r = cfg.target_dim as f64;
    if !cfg.shared || min_width == 0 {
        return cfg.target_dim;
    }
    let d = min_width as f64;
    ((1.0 / (1.0 / r + 1.0 / d)).floor() as usize).max(3)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_from(values: Vec<f32>, m: usize, c: usize, d: usize) -> ActivationSet {
        ActivationSet::new("m", m, c, d, values).unwrap()
    }

    #[test]
    fn flatten_ordering_definition() {
        // [[a],[b]],[[c],[d]] -> rows a, b, c, d
        let set = set_from(vec![1.0, 2.0, 3.0, 4.0], 2, 2, 1);
        let flat = flatten_order(&set);
        assert_eq!(flat.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn one_by_one_grid_matches_vector() {
        // ActivationSet requires M, C >= 2, so check the first row of a larger grid.
        let data: Vec<f32> = (0..2 * 2 * 5).map(|v| v as f32).collect();
        let set = set_from(data, 2, 2, 5);
        let flat = flatten_order(&set);
        let row0: Vec<f64> = flat.row(0).iter().copied().collect();
        assert_eq!(row0, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_input_projects_to_zero() {
        let set = ActivationSet::zeros("z", 2, 2, 8);
        let fm = project(&set, &RpConfig { target_dim: 16, ..Default::default() }, 0);
        assert_eq!(fm.data.shape(), (4, 16));
        assert!(fm.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_rows_nest_across_widths() {
        let cfg = RpConfig { target_dim: 12, seed: 7, ..Default::default() };
        let wide = projection_matrix(&cfg, 20, 0);
        let narrow = projection_matrix(&cfg, 8, 5);
        assert_eq!(wide.rows(0, 8).into_owned(), narrow);
    }

    #[test]
    fn per_model_streams_differ() {
        let cfg = RpConfig { target_dim: 12, seed: 7, shared: false, ..Default::default() };
        assert_ne!(projection_matrix(&cfg, 8, 0), projection_matrix(&cfg, 8, 1));
        assert_eq!(projection_matrix(&cfg, 8, 3), projection_matrix(&cfg, 8, 3));
    }

    #[test]
    fn sparse_entries_take_three_values() {
        let cfg = RpConfig { target_dim: 300, seed: 1, scheme: RpScheme::SparseSign, shared: true };
        let p = projection_matrix(&cfg, 40, 0);
        let mag = (3.0f64 / 300.0).sqrt();
        let zeros = p.iter().filter(|&&v| v == 0.0).count() as f64 / p.len() as f64;
        assert!(p.iter().all(|&v| v == 0.0 || (v.abs() - mag).abs() < 1e-15));
        assert!((zeros - 2.0 / 3.0).abs() < 0.02, "zero fraction {zeros}");
    }

    #[test]
    fn standardize_gives_unit_columns() {
        let data: Vec<f32> = (0..3 * 4 * 6).map(|v| ((v * 37) % 11) as f32).collect();
        let set = ActivationSet::new("m", 3, 4, 6, data).unwrap();
        let mut fm = project(&set, &RpConfig { target_dim: 9, ..Default::default() }, 0);
        fm.standardize_columns();
        for col in fm.data.column_iter() {
            let n = col.len() as f64;
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn effective_sample_size_bounds() {
        let shared = RpConfig { target_dim: 500, ..Default::default() };
        assert_eq!(effective_sample_size(&shared, 64), 56);
        let own = RpConfig { shared: false, ..shared };
        assert_eq!(effective_sample_size(&own, 64), 500);
    }
}
