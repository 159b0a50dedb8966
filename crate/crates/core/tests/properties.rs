use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use trojatensor::cluster::{kmeans2, silhouette, wcss, KMeansOptions};
use trojatensor::features::{flatten_order, project, unflatten, FeatureMatrix, RpConfig, RpScheme, Scaling};
use trojatensor::iva::{iva_decompose, pca_reduce, IvaOptions};
use trojatensor::parafac2::{parafac2_als, Parafac2Options};
use trojatensor::stats::{
    binomial_ci, compute_metrics, correlation_report, decide, Confusion, Multiplicity, Verdict,
};
use trojatensor::zoo::{decode_atf, encode_atf, ActivationSet, Label, ModelEntry, Split, ZooManifest};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| normal(rng))
}

fn sample_cov(x: &DMatrix<f64>) -> DMatrix<f64> {
    let r = x.ncols() as f64;
    let mean = x.column_mean();
    let mut c = x.clone();
    for mut col in c.column_iter_mut() {
        col -= &mean;
    }
    &c * c.transpose() / r
}

fn centered_rows(mut x: DMatrix<f64>) -> DMatrix<f64> {
    let mean = x.column_mean();
    for mut col in x.column_iter_mut() {
        col -= &mean;
    }
    x
}

fn int_set(id: &str, m: usize, c: usize, d: usize, vals: &[i8]) -> ActivationSet {
    let data: Vec<f32> = (0..m * c * d).map(|i| vals[i % vals.len()] as f32).collect();
    ActivationSet::new(id, m, c, d, data).unwrap()
}

/// `K` datasets sharing `N` independent SCVs with per-SCV correlation `rho[n]`.
fn scv_data(n: usize, k: usize, r: usize, rho: &[f64], seed: u64) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sources = vec![DMatrix::zeros(n, r); k];
    for comp in 0..n {
        for t in 0..r {
            let common = normal(&mut rng);
            for s in sources.iter_mut() {
                let own = normal(&mut rng);
                s[(comp, t)] = rho[comp].sqrt() * common + (1.0 - rho[comp]).sqrt() * own;
            }
        }
    }
    let mixing: Vec<DMatrix<f64>> = (0..k).map(|_| gaussian(n, n, &mut rng)).collect();
    let x = mixing
        .iter()
        .zip(&sources)
        .map(|(a, s)| centered_rows(a * s))
        .collect();
    (x, mixing)
}

fn entry(id: &str, label: Label, split: Split) -> ModelEntry {
    ModelEntry {
        id: id.into(),
        path: PathBuf::from(format!("{id}.atf")),
        label,
        split,
        arch: String::new(),
    }
}

fn rotate(points: &[[f64; 2]], theta: f64, shift: [f64; 2]) -> Vec<[f64; 2]> {
    let (s, c) = theta.sin_cos();
    points
        .iter()
        .map(|p| [c * p[0] - s * p[1] + shift[0], s * p[0] + c * p[1] + shift[1]])
        .collect()
}

fn points_strategy() -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec(prop::array::uniform2(-50.0f64..50.0), 4..30)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn atf_round_trip_is_bit_exact(m in 2usize..5, c in 2usize..5, d in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..m * c * d).map(|_| (normal(&mut rng) * 1e3) as f32).collect();
        let set = ActivationSet::new("m", m, c, d, data).unwrap();
        let back = decode_atf("m", std::path::Path::new("m.atf"), &encode_atf(&set)).unwrap();
        prop_assert_eq!(
            set.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        prop_assert_eq!((back.exemplars, back.classes, back.width), (m, c, d));
    }

    #[test]
    fn flatten_round_trip(m in 2usize..5, c in 2usize..5, d in 1usize..7, vals in prop::collection::vec(-100i8..100, 1..40)) {
        let set = int_set("m", m, c, d, &vals);
        let flat = flatten_order(&set);
        prop_assert_eq!(flat.shape(), (m * c, d));
        let back = unflatten(&flat, m, c);
        let orig: Vec<f64> = set.data().iter().map(|&v| v as f64).collect();
        prop_assert_eq!(back, orig);
    }

    #[test]
    fn projection_is_linear(
        m in 2usize..4, c in 2usize..4, d in 1usize..8,
        xs in prop::collection::vec(-8i8..8, 1..30),
        ys in prop::collection::vec(-8i8..8, 1..30),
        alpha in -3i8..4, beta in -3i8..4,
        seed in any::<u64>(), sparse in any::<bool>(),
    ) {
        let cfg = RpConfig {
            target_dim: 17,
            seed,
            scheme: if sparse { RpScheme::SparseSign } else { RpScheme::Gaussian },
            ..Default::default()
        };
        let x = int_set("x", m, c, d, &xs);
        let y = int_set("y", m, c, d, &ys);
        let combo: Vec<f32> = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&a, &b)| alpha as f32 * a + beta as f32 * b)
            .collect();
        let z = ActivationSet::new("z", m, c, d, combo).unwrap();
        let lhs = project(&z, &cfg, 0).data;
        let rhs = project(&x, &cfg, 0).data * alpha as f64 + project(&y, &cfg, 0).data * beta as f64;
        let scale = 1.0 + rhs.amax();
        prop_assert!((lhs - rhs).amax() <= 1e-10 * scale);
    }

    #[test]
    fn projection_width_is_uniform(d in 1usize..300, r in 1usize..64, seed in any::<u64>()) {
        let set = ActivationSet::zeros("m", 2, 3, d);
        let fm = project(&set, &RpConfig { target_dim: r, seed, ..Default::default() }, 3);
        prop_assert_eq!(fm.data.shape(), (6, r));
        prop_assert_eq!(fm.source_dim, d);
    }

    #[test]
    fn standardized_columns(rows in 3usize..40, cols in 1usize..12, seed in any::<u64>(), offset in -1e3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = gaussian(rows, cols, &mut rng).add_scalar(offset);
        let mut fm = FeatureMatrix { model_id: "m".into(), data, source_dim: cols };
        fm.apply(Scaling::Standardize);
        for col in fm.data.column_iter() {
            let mean = col.mean();
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
            prop_assert!(mean.abs() <= 1e-9, "mean {mean}");
            prop_assert!((var - 1.0).abs() <= 1e-6, "var {var}");
        }
    }

    #[test]
    fn random_projection_keeps_distances(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 200;
        let cfg = RpConfig { seed, ..Default::default() };
        let p = trojatensor::features::projection_matrix(&cfg, d, 0);
        for _ in 0..5 {
            let u = gaussian(1, d, &mut rng);
            let v = gaussian(1, d, &mut rng);
            let before = (&u - &v).norm_squared();
            let after = ((&u - &v) * &p).norm_squared();
            let ratio = after / before;
            prop_assert!((0.5..1.5).contains(&ratio), "ratio {ratio}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn whitening_gives_identity(rows in 12usize..40, cols in 20usize..60, order in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fm = FeatureMatrix { model_id: "m".into(), data: gaussian(rows, cols, &mut rng), source_dim: cols };
        fm.center_columns();
        let red = pca_reduce(&fm, order, 0.0).unwrap();
        let cov = sample_cov(&red.reduced);
        prop_assert!((cov - DMatrix::<f64>::identity(order, order)).amax() <= 1e-8);
        prop_assert!((0.0..=1.0).contains(&red.explained_variance));
    }

    #[test]
    fn iva_cost_monotone_and_unit_variance(seed in any::<u64>(), k in 2usize..5, n in 2usize..5) {
        let rho: Vec<f64> = (0..n).map(|i| 0.9 - 0.15 * i as f64).collect();
        let (x, _) = scv_data(n, k, 300, &rho, seed);
        let res = iva_decompose(&x, &IvaOptions { max_iter: 200, seed, ..Default::default() }).unwrap();
        for w in res.cost_trace.windows(2).skip(5) {
            prop_assert!(w[1] <= w[0] + 1e-10, "cost rose {} -> {}", w[0], w[1]);
        }
        for s in &res.sources {
            for row in s.row_iter() {
                let mean = row.mean();
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
                prop_assert!((var - 1.0).abs() <= 1e-6, "variance {var}");
            }
        }
    }

    #[test]
    fn iva_scaling_leaves_order_and_mask(seed in any::<u64>(), which in 0usize..3, c in prop_oneof![-20.0f64..-0.05, 0.05f64..20.0]) {
        let (x, _) = scv_data(3, 3, 400, &[0.9, 0.6, 0.3], seed);
        let mut scaled = x.clone();
        scaled[which] *= c;
        let opts = IvaOptions { max_iter: 100, seed, ..Default::default() };
        let a = iva_decompose(&x, &opts).unwrap();
        let b = iva_decompose(&scaled, &opts).unwrap();
        prop_assert_eq!(&a.scv_order, &b.scv_order);
        let ids: Vec<String> = (0..3).map(|i| format!("m{i}")).collect();
        let first = |r: &trojatensor::iva::IvaResult| -> Vec<DVector<f64>> {
            r.sources.iter().map(|s| s.row(r.scv_order[0]).transpose()).collect()
        };
        let ra = correlation_report(&ids, &first(&a), 400, 0.05, Multiplicity::AllPairs).unwrap();
        let rb = correlation_report(&ids, &first(&b), 400, 0.05, Multiplicity::AllPairs).unwrap();
        prop_assert_eq!(ra.significant, rb.significant);
    }

    #[test]
    fn iva_two_by_two_recovers_permutation(seed in any::<u64>()) {
        let (x, mixing) = scv_data(2, 2, 3000, &[0.9, 0.3], seed);
        let res = iva_decompose(&x, &IvaOptions { seed, ..Default::default() }).unwrap();
        for (w, a) in res.demixing.iter().zip(&mixing) {
            let g = w * a;
            for row in g.row_iter() {
                let (big, small) = if row[0].abs() >= row[1].abs() { (row[0].abs(), row[1].abs()) } else { (row[1].abs(), row[0].abs()) };
                prop_assert!(small <= 0.1 * big, "W A = {g}");
            }
        }
    }

    #[test]
    fn parafac2_fit_monotone_and_constraint_held(seed in any::<u64>(), k in 2usize..6, rank in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rows, cols) = (15, 25);
        let a = gaussian(rows, rank, &mut rng);
        let slices: Vec<FeatureMatrix> = (0..k)
            .map(|i| {
                let s = gaussian(cols, rank, &mut rng);
                let d = DMatrix::from_diagonal(&DVector::from_fn(rank, |_, _| 1.0 + normal(&mut rng).abs()));
                let noise = gaussian(rows, cols, &mut rng) * 0.3;
                FeatureMatrix { model_id: format!("m{i}"), data: &a * d * s.transpose() + noise, source_dim: cols }
            })
            .collect();
        let res = parafac2_als(&slices, rank, &Parafac2Options { max_iter: 300, seed, ..Default::default() }).unwrap();
        for w in res.fit_trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-12, "fit fell {} -> {}", w[0], w[1]);
        }
        prop_assert!((0.0..=1.0).contains(&res.fit));
        prop_assert!(res.constraint_drift() <= 1e-6, "drift {}", res.constraint_drift());
    }

}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn parafac2_slice_scaling_scales_loadings(seed in any::<u64>(), which in 0usize..6, c in 0.2f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rows, cols, rank) = (12, 20, 2);
        let a = gaussian(rows, rank, &mut rng);
        let h = gaussian(rank, rank, &mut rng);
        let slices: Vec<FeatureMatrix> = (0..6)
            .map(|i| {
                let q = gaussian(cols, rank, &mut rng).qr().q();
                let d = DMatrix::from_diagonal(&DVector::from_fn(rank, |_, _| 0.5 + normal(&mut rng).abs()));
                FeatureMatrix { model_id: format!("m{i}"), data: &a * d * (&q * &h).transpose(), source_dim: cols }
            })
            .collect();
        let mut scaled = slices.clone();
        scaled[which].data *= c;
        let opts = Parafac2Options { max_iter: 20_000, tol: 1e-15, seed };
        let base = parafac2_als(&slices, rank, &opts).unwrap();
        let res = parafac2_als(&scaled, rank, &opts).unwrap();
        prop_assume!(base.fit > 1.0 - 1e-12 && res.fit > 1.0 - 1e-12);
        let mismatch = |perm: [usize; 2]| -> f64 {
            let mut worst = 0.0f64;
            for k in 0..6 {
                let factor = if k == which { c } else { 1.0 };
                for n in 0..rank {
                    let expect = base.loadings[(k, n)] * factor;
                    let err = (res.loadings[(k, perm[n])] - expect).abs() / expect.abs().max(1.0);
                    worst = worst.max(err);
                }
            }
            for (sa, sb) in base.sources.iter().zip(&res.sources) {
                let (ga, gb) = (sa.transpose() * sa, sb.transpose() * sb);
                for i in 0..rank {
                    for j in 0..rank {
                        worst = worst.max((ga[(i, j)].abs() - gb[(perm[i], perm[j])].abs()).abs());
                    }
                }
            }
            worst
        };
        let err = mismatch([0, 1]).min(mismatch([1, 0]));
        prop_assert!(err <= 1e-4, "loading/cross-product mismatch {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn significance_mask_consistent(seed in any::<u64>(), k in 3usize..9, alpha in 0.001f64..0.2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let common = gaussian(40, 1, &mut rng);
        let vectors: Vec<DVector<f64>> = (0..k)
            .map(|i| {
                let w = if i % 2 == 0 { 1.0 } else { 0.0 };
                (&common * w + gaussian(40, 1, &mut rng)).column(0).into_owned()
            })
            .collect();
        let ids: Vec<String> = (0..k).map(|i| format!("m{i}")).collect();
        let rep = correlation_report(&ids, &vectors, 40, alpha, Multiplicity::AllPairs).unwrap();
        for i in 0..k {
            prop_assert!(!rep.significant[(i, i)]);
            for j in 0..k {
                prop_assert_eq!(rep.significant[(i, j)], rep.significant[(j, i)]);
                prop_assert!((rep.p_raw[(i, j)] - rep.p_raw[(j, i)]).abs() == 0.0);
                prop_assert!((-1.0..=1.0).contains(&rep.r[(i, j)]));
                if rep.significant[(i, j)] {
                    prop_assert!(rep.p_adj[(i, j)] < alpha);
                }
            }
        }
    }

    #[test]
    fn source_scaling_leaves_verdicts(seed in any::<u64>(), which in 0usize..6, c in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let common = gaussian(60, 1, &mut rng);
        let vectors: Vec<DVector<f64>> = (0..6)
            .map(|i| (&common * if i < 3 { 0.8 } else { 0.0 } + gaussian(60, 1, &mut rng)).column(0).into_owned())
            .collect();
        let mut scaled = vectors.clone();
        scaled[which] *= c;
        let ids: Vec<String> = (0..6).map(|i| format!("m{i}")).collect();
        let manifest = ZooManifest::new(
            (0..6)
                .map(|i| entry(&ids[i], if i < 3 { Label::Backdoor } else { Label::Clean }, if i % 2 == 0 { Split::Train } else { Split::Test }))
                .collect(),
            2, 2, "",
        ).unwrap();
        let a = correlation_report(&ids, &vectors, 60, 0.05, Multiplicity::AllPairs).unwrap();
        let b = correlation_report(&ids, &scaled, 60, 0.05, Multiplicity::AllPairs).unwrap();
        prop_assert_eq!(&a.significant, &b.significant);
        for i in 0..6 {
            for j in 0..6 {
                prop_assert!((a.r[(i, j)].abs() - b.r[(i, j)].abs()).abs() <= 1e-12);
            }
        }
        let va: Vec<Verdict> = decide(&a, &manifest).unwrap().iter().map(|d| d.verdict).collect();
        let vb: Vec<Verdict> = decide(&b, &manifest).unwrap().iter().map(|d| d.verdict).collect();
        prop_assert_eq!(va, vb);
    }

    #[test]
    fn decide_is_monotone(seed in any::<u64>(), target in 0usize..6, reference in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vectors: Vec<DVector<f64>> = (0..6).map(|_| gaussian(30, 1, &mut rng).column(0).into_owned()).collect();
        let ids: Vec<String> = (0..6).map(|i| format!("m{i}")).collect();
        let manifest = ZooManifest::new(
            (0..6).map(|i| entry(&ids[i], if i < 3 { Label::Backdoor } else { Label::Clean }, if i < 3 { Split::Train } else { Split::Test })).collect(),
            2, 2, "",
        ).unwrap();
        let before = correlation_report(&ids, &vectors, 30, 0.05, Multiplicity::AllPairs).unwrap();
        let mut after = before.clone();
        prop_assume!(target != reference);
        after.significant[(target, reference)] = true;
        after.significant[(reference, target)] = true;
        let b = decide(&before, &manifest).unwrap();
        let a = decide(&after, &manifest).unwrap();
        for (x, y) in b.iter().zip(&a) {
            if x.verdict == Verdict::Backdoor {
                prop_assert_eq!(y.verdict, Verdict::Backdoor);
            }
        }
        prop_assert_eq!(a[target].verdict, Verdict::Backdoor);
    }

    #[test]
    fn metric_identities(tp in 0usize..200, fp in 0usize..200, tn in 0usize..200, fn_ in 0usize..200) {
        let c = Confusion { tp, fp, tn, fn_ };
        prop_assume!(c.total() > 0);
        let m = compute_metrics(&c).unwrap();
        prop_assert_eq!(m.accuracy, (tp + tn) as f64 / (tp + fp + tn + fn_) as f64);
        match m.precision {
            Some(p) => prop_assert_eq!(p, tp as f64 / (tp + fp) as f64),
            None => prop_assert_eq!(tp + fp, 0),
        }
        match m.recall {
            Some(r) => prop_assert_eq!(r, tp as f64 / (tp + fn_) as f64),
            None => prop_assert_eq!(tp + fn_, 0),
        }
    }

    #[test]
    fn ci_shrinks_with_n(acc in 0.0f64..=1.0, n in 1usize..10_000, extra in 1usize..10_000) {
        prop_assert!(binomial_ci(acc, n + extra, 1.96) <= binomial_ci(acc, n, 1.96));
    }

    #[test]
    fn silhouette_rigid_invariance(points in points_strategy(), theta in -3.2f64..3.2, dx in -100.0f64..100.0, dy in -100.0f64..100.0) {
        let assign: Vec<usize> = (0..points.len()).map(|i| i % 2).collect();
        let s = silhouette(&points, &assign).unwrap();
        let t = silhouette(&rotate(&points, theta, [dx, dy]), &assign).unwrap();
        prop_assert!((s - t).abs() <= 1e-9, "{s} vs {t}");
        prop_assert!((-1.0..=1.0).contains(&s));
        let swapped: Vec<usize> = assign.iter().map(|a| 1 - a).collect();
        prop_assert!((silhouette(&points, &swapped).unwrap() - s).abs() <= 1e-12);
    }

    #[test]
    fn kmeans_beats_random_assignment(points in points_strategy(), seed in any::<u64>(), labels in prop::collection::vec(0usize..2, 30)) {
        let rep = match kmeans2(&points, None, &KMeansOptions { seed, ..Default::default() }) {
            Ok(r) => r,
            Err(_) => return Ok(()),
        };
        let random: Vec<usize> = labels[..points.len()].to_vec();
        prop_assume!(random.contains(&0) && random.contains(&1));
        prop_assert!(rep.wcss <= wcss(&points, &random) + 1e-9);
        prop_assert!((-1.0..=1.0).contains(&rep.mean_silhouette));
        let relabeled: Vec<usize> = rep.assignments.iter().map(|a| 1 - a).collect();
        if !rep.degenerate {
            prop_assert!((silhouette(&points, &relabeled).unwrap() - rep.mean_silhouette).abs() <= 1e-12);
        }
    }
}
