use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use sitegp_core::baselines::{kmeans_1d, lloyd_1d, two_step_predict, ClusterMap};
use sitegp_core::hier::hgpr;
use sitegp_core::metrics::delta_error_values;
use sitegp_core::synth::{generate_wafer, SynthConfig, Trend};
use sitegp_core::wafer::nested_sample;
use sitegp_core::{DieCoord, GpModel, GpOptions, KernelParams, MeasurementSet, Tiling, TouchdownLayout, WaferGeometry};

fn coord_set(n: usize) -> impl Strategy<Value = Vec<DieCoord>> {
    prop::collection::btree_set((0i32..15, 0i32..15), n).prop_map(|s| s.into_iter().map(|(x, y)| DieCoord::new(x, y)).collect())
}

fn params() -> impl Strategy<Value = KernelParams> {
    (0.1f64..3.0, 1.0f64..40.0, 1e-4f64..1e-1).prop_map(|(a, b, c)| KernelParams::new(a, b, c).unwrap())
}

fn fast_opts() -> GpOptions {
    GpOptions { grid: [4, 4, 3], refine_tol: 0.0, ..GpOptions::default() }
}

fn small_wafer(seed: u64, block: (i32, i32), r: i32) -> MeasurementSet {
    let layout = TouchdownLayout::block(block.0, block.1).unwrap();
    let s = layout.site_count();
    let cfg = SynthConfig {
        geometry: WaferGeometry::disc(0, 0, r).unwrap(),
        layout,
        trend: Trend { a: 0.002, b: 0.01, c: 0.0, d: 0.0 },
        site_offsets: (0..s).map(|i| i as f64 * 0.3).collect(),
        site_sigma: vec![0.01; s],
        drift: BTreeMap::new(),
        dropout: 0.0,
        seed,
    };
    generate_wafer(&cfg, 1, 1).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn training_order_does_not_matter(xs in coord_set(12), p in params(), shift in 1usize..11, t in coord_set(4)) {
        let ys: Vec<f64> = xs.iter().map(|c| (f64::from(c.x) * 0.3).sin() + 0.05 * f64::from(c.y)).collect();
        let a = GpModel::fit_centered(&xs, &ys, p, 1e-8).unwrap().predict(&t);
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.rotate_left(shift);
        idx.reverse();
        let px: Vec<DieCoord> = idx.iter().map(|&i| xs[i]).collect();
        let py: Vec<f64> = idx.iter().map(|&i| ys[i]).collect();
        let b = GpModel::fit_centered(&px, &py, p, 1e-8).unwrap().predict(&t);
        for j in 0..t.len() {
            prop_assert!((a.means[j] - b.means[j]).abs() < 1e-8);
            prop_assert!((a.variances[j] - b.variances[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn more_data_never_raises_variance(xs in coord_set(14), p in params(), t in coord_set(6)) {
        let ys = vec![0.0; xs.len()];
        let fewer = GpModel::fit(&xs[..9], &ys[..9], p).unwrap().predict(&t);
        let more = GpModel::fit(&xs, &ys, p).unwrap().predict(&t);
        for j in 0..t.len() {
            prop_assert!(more.variances[j] <= fewer.variances[j] + 1e-10 * p.theta1);
            prop_assert!(more.variances[j] >= 0.0 && fewer.variances[j] <= p.theta1 + 1e-12);
        }
    }

    #[test]
    fn touchdowns_partition_the_wafer(w in 1i32..4, h in 1i32..4, cx in -3i32..3, cy in -3i32..3, r in 2i32..9) {
        let g = WaferGeometry::disc(cx, cy, r).unwrap();
        let l = TouchdownLayout::block(w, h).unwrap();
        let tiling = Tiling::new(g.clone(), l).unwrap();
        let mut seen = BTreeSet::new();
        for &a in tiling.anchors() {
            for (s, c) in tiling.dies_of(a) {
                prop_assert!(g.contains(c));
                prop_assert!(seen.insert(c), "die covered twice");
                prop_assert_eq!(tiling.site_of(c).unwrap(), s);
                prop_assert_eq!(tiling.anchor_of(c).unwrap(), a);
            }
        }
        prop_assert_eq!(seen.len(), g.die_count());
    }

    #[test]
    fn delta_is_shift_and_scale_invariant(
        pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..40),
        shift in -100.0f64..100.0,
        scale in 0.01f64..100.0,
        d in 0.1f64..10.0,
    ) {
        let (m, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let a = delta_error_values(&m, &y, d).unwrap();
        let ms: Vec<f64> = m.iter().map(|v| scale * v + shift).collect();
        let ys: Vec<f64> = y.iter().map(|v| scale * v + shift).collect();
        let b = delta_error_values(&ms, &ys, scale * d).unwrap();
        for (p, q) in a.deltas.iter().zip(&b.deltas) {
            prop_assert!((p - q).abs() < 1e-9 * (1.0 + p.abs()));
        }
        prop_assert!((a.mean_abs - b.mean_abs).abs() < 1e-9 * (1.0 + a.mean_abs));
    }

    #[test]
    fn lloyd_objective_never_increases(values in prop::collection::vec(-10.0f64..10.0, 5..60), k in 1usize..5) {
        let init: Vec<f64> = values.iter().take(k).copied().collect();
        let distinct = { let mut v = values.clone(); v.sort_by(f64::total_cmp); v.dedup(); v.len() };
        prop_assume!(distinct >= k);
        let mut init = init;
        init.sort_by(f64::total_cmp);
        init.dedup();
        let run = lloyd_1d(&values, &init).unwrap();
        for w in run.objective.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * (1.0 + w[0]));
        }
    }

    #[test]
    fn nested_samples_grow(n in 1usize..300, lo in 0.01f64..1.0, hi in 0.01f64..1.0, seed in any::<u64>()) {
        let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        let (a, _) = nested_sample(n, lo, seed).unwrap();
        let (b, rest) = nested_sample(n, hi, seed).unwrap();
        prop_assert!(a.iter().all(|i| b.binary_search(i).is_ok()));
        prop_assert_eq!(b.len() + rest.len(), n);
    }
}

fn best_contiguous_wcss(sorted: &[f64], k: usize) -> f64 {
    fn sse(v: &[f64]) -> f64 {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m) * (x - m)).sum()
    }
    fn go(v: &[f64], k: usize) -> f64 {
        if k == 1 {
            return sse(v);
        }
        (1..=v.len() - (k - 1)).map(|i| sse(&v[..i]) + go(&v[i..], k - 1)).fold(f64::INFINITY, f64::min)
    }
    go(sorted, k)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Well-separated groups: k-means must find the optimal contiguous split.
    #[test]
    fn kmeans_matches_exhaustive_split(
        sizes in prop::collection::vec(1usize..8, 2..5),
        jitter in prop::collection::vec(-0.4f64..0.4, 30),
        seed in any::<u64>(),
    ) {
        let mut values = Vec::new();
        for (g, &s) in sizes.iter().enumerate() {
            for i in 0..s {
                values.push(10.0 * g as f64 + jitter[(values.len() + i) % jitter.len()]);
            }
        }
        prop_assume!(values.len() <= 30);
        let k = sizes.len();
        let km = kmeans_1d(&values, k, seed).unwrap();
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let best = best_contiguous_wcss(&sorted, k);
        prop_assert!((km.wcss - best).abs() < 1e-9 * (1.0 + best), "{} vs {}", km.wcss, best);
        for w in km.centroids.windows(2) {
            prop_assert!(w[0] > w[1]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn hgpr_sites_are_isolated(seed in 0u64..1000, rate in 0.3f64..0.7, site in 0usize..4, bump in 0.5f64..5.0) {
        let w = small_wafer(seed, (2, 2), 7);
        let (train_idx, test_idx) = nested_sample(w.len(), rate, seed).unwrap();
        let train = w.select(&train_idx).unwrap();
        let test: Vec<DieCoord> = test_idx.iter().map(|&i| w.records()[i].coord).collect();
        let opts = fast_opts();
        let a = hgpr(&train, &test, &opts).unwrap();
        prop_assert_eq!(&a.prediction.coords, &test);

        let mut recs = train.records().to_vec();
        for r in &mut recs {
            if r.site.0 == site {
                r.value += bump * (1.0 + f64::from(r.coord.x).abs());
            }
        }
        let bumped = MeasurementSet::new(recs, train.layout().clone(), train.geometry().clone()).unwrap();
        let b = hgpr(&bumped, &test, &opts).unwrap();
        let tiling = w.tiling().unwrap();
        for (j, c) in test.iter().enumerate() {
            if tiling.site_of(*c).unwrap().0 != site && !a.groups[tiling.site_of(*c).unwrap().0].is_fallback() {
                prop_assert_eq!(a.prediction.means[j], b.prediction.means[j]);
                prop_assert_eq!(a.prediction.variances[j], b.prediction.variances[j]);
            }
        }
    }

    #[test]
    fn two_step_with_site_labels_is_hgpr(seed in 0u64..1000, rate in 0.2f64..0.8) {
        let w = small_wafer(seed, (2, 1), 6);
        let (train_idx, test_idx) = nested_sample(w.len(), rate, seed).unwrap();
        let train = w.select(&train_idx).unwrap();
        let test: Vec<DieCoord> = test_idx.iter().map(|&i| w.records()[i].coord).collect();
        let assignment = w.records().iter().map(|r| (r.coord, r.site.0)).collect();
        let map = ClusterMap::new(2, (1, 1), assignment).unwrap();
        let opts = fast_opts();
        let a = hgpr(&train, &test, &opts).unwrap();
        let b = two_step_predict(&map, &train, &test, &opts).unwrap();
        prop_assert_eq!(a.prediction, b.prediction);
    }
}
