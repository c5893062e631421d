//! Comparison methods: a single GP over the whole wafer, and the two-step
//! method (1-D k-means on a fully measured calibration wafer, then one GP
//! per value cluster on later wafers).

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gp::{self, GpOptions, HyperFit, PredictionResult};
use crate::hier::{grouped_predict, GroupedPrediction};
use crate::wafer::{DieCoord, MeasurementSet, WaferGeometry};

const KMEANS_RESTARTS: usize = 10;
const LLOYD_MAX_ITER: usize = 300;

/// Naive GP: one hyperparameter search and one fit over all training data.
pub fn naive_gp(train: &MeasurementSet, test: &[DieCoord], opts: &GpOptions) -> Result<(HyperFit, PredictionResult)> {
    gp::fit_predict(&train.coords(), &train.values(), test, opts)
}

/// Result of 1-D k-means.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    /// Label per input value, in input order.
    pub labels: Vec<usize>,
    /// Cluster means, strictly descending; label `j` has centroid `centroids[j]`.
    pub centroids: Vec<f64>,
    /// Within-cluster sum of squares.
    pub wcss: f64,
}

/// One Lloyd run with its objective after every update step.
#[derive(Clone, Debug)]
pub struct LloydRun {
    pub result: KMeans,
    pub objective: Vec<f64>,
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::EmptyInput("values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidMeasurements("non-finite value".into()));
    }
    Ok(())
}

pub fn distinct_count(values: &[f64]) -> usize {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    s.len()
}

// Sorted view of the data: the ascending values and, for each, its input index.
struct Sorted {
    v: Vec<f64>,
    order: Vec<usize>,
}

impl Sorted {
    fn new(values: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        Self { v: order.iter().map(|&i| values[i]).collect(), order }
    }

    // End index of each cluster for ascending centroids: value <= midpoint
    // goes to the lower centroid.
    fn bounds(&self, c: &[f64]) -> Vec<usize> {
        let k = c.len();
        let mut b = Vec::with_capacity(k);
        for j in 0..k - 1 {
            let mid = 0.5 * (c[j] + c[j + 1]);
            b.push(self.v.partition_point(|&x| x <= mid));
        }
        b.push(self.v.len());
        b
    }
}

/// Lloyd iterations from the given initial centroids until the assignment
/// stops changing. Clusters that become empty are moved onto the point
/// farthest from its centroid.
pub fn lloyd_1d(values: &[f64], init: &[f64]) -> Result<LloydRun> {
    check_finite(values)?;
    if init.is_empty() {
        return Err(Error::InvalidParams("k must be at least 1"));
    }
    let distinct = distinct_count(values);
    if init.len() > distinct {
        return Err(Error::KTooLarge { k: init.len(), distinct });
    }
    let sorted = Sorted::new(values);
    Ok(lloyd_sorted(&sorted, init.to_vec()))
}

fn lloyd_sorted(s: &Sorted, mut c: Vec<f64>) -> LloydRun {
    c.sort_by(f64::total_cmp);
    let k = c.len();
    let mut objective = Vec::new();
    let mut prev: Option<Vec<usize>> = None;
    for _ in 0..LLOYD_MAX_ITER {
        let b = s.bounds(&c);
        if prev.as_ref() == Some(&b) {
            break;
        }
        let mut obj = 0.0;
        let mut empty = Vec::new();
        let mut lo = 0;
        for j in 0..k {
            let hi = b[j];
            if hi > lo {
                let m = s.v[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
                c[j] = m;
                obj += s.v[lo..hi].iter().map(|x| (x - m) * (x - m)).sum::<f64>();
            } else {
                empty.push(j);
            }
            lo = hi;
        }
        if !empty.is_empty() {
            reseed_empty(s, &b, &mut c, &empty);
        }
        c.sort_by(f64::total_cmp);
        objective.push(obj);
        prev = Some(b);
    }
    let b = s.bounds(&c);
    let mut labels = vec![0; s.v.len()];
    let mut wcss = 0.0;
    let mut lo = 0;
    for j in 0..k {
        for i in lo..b[j] {
            // descending relabel
            labels[s.order[i]] = k - 1 - j;
            wcss += (s.v[i] - c[j]) * (s.v[i] - c[j]);
        }
        lo = b[j];
    }
    c.reverse();
    LloydRun { result: KMeans { labels, centroids: c, wcss }, objective }
}

fn reseed_empty(s: &Sorted, b: &[usize], c: &mut [f64], empty: &[usize]) {
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(s.v.len());
    let mut lo = 0;
    for (j, &hi) in b.iter().enumerate() {
        for i in lo..hi {
            cand.push(((s.v[i] - c[j]) * (s.v[i] - c[j]), i));
        }
        lo = hi;
    }
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut it = cand.into_iter();
    for &j in empty {
        for (_, i) in it.by_ref() {
            let x = s.v[i];
            if !c.contains(&x) {
                c[j] = x;
                break;
            }
        }
    }
}

fn plus_plus_init(s: &Sorted, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = s.v.len();
    let mut c = Vec::with_capacity(k);
    c.push(s.v[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = s.v.iter().map(|x| (x - c[0]) * (x - c[0])).collect();
    while c.len() < k {
        let total: f64 = d2.iter().sum();
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 {
                acc += d;
                pick = Some(i);
                if acc >= u {
                    break;
                }
            }
        }
        let x = s.v[pick.expect("k <= distinct leaves a point off the centroids")];
        c.push(x);
        for (d, v) in d2.iter_mut().zip(&s.v) {
            *d = d.min((v - x) * (v - x));
        }
    }
    c
}

/// 1-D k-means with k-means++ seeding; the best of ten seeded restarts is
/// kept. Deterministic given `seed`.
pub fn kmeans_1d(values: &[f64], k: usize, seed: u64) -> Result<KMeans> {
    check_finite(values)?;
    if k == 0 {
        return Err(Error::InvalidParams("k must be at least 1"));
    }
    let distinct = distinct_count(values);
    if k > distinct {
        return Err(Error::KTooLarge { k, distinct });
    }
    let s = Sorted::new(values);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeans> = None;
    for _ in 0..KMEANS_RESTARTS {
        let init = plus_plus_init(&s, k, &mut rng);
        let run = lloyd_sorted(&s, init).result;
        if best.as_ref().is_none_or(|b| run.wcss < b.wcss) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

struct ClusterStats {
    k: usize,
    counts: Vec<usize>,
    means: Vec<f64>,
}

fn cluster_stats(values: &[f64], labels: &[usize], undefined: fn(&'static str) -> Error) -> Result<ClusterStats> {
    if values.len() != labels.len() {
        return Err(Error::LengthMismatch { left: values.len(), right: labels.len() });
    }
    check_finite(values)?;
    let k = labels.iter().max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(undefined("fewer than two clusters"));
    }
    let mut counts = vec![0usize; k];
    let mut sums = vec![0.0; k];
    for (&v, &l) in values.iter().zip(labels) {
        counts[l] += 1;
        sums[l] += v;
    }
    if counts.contains(&0) {
        return Err(undefined("empty cluster"));
    }
    let means = sums.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect();
    Ok(ClusterStats { k, counts, means })
}

/// Calinski-Harabasz index `[B/(k-1)] / [W/(N-k)]`. A zero within-cluster
/// sum of squares yields `f64::MAX`.
pub fn ch_index(values: &[f64], labels: &[usize]) -> Result<f64> {
    let st = cluster_stats(values, labels, Error::ChUndefined)?;
    let n = values.len();
    if n <= st.k {
        return Err(Error::ChUndefined("need more points than clusters"));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let b: f64 = st.means.iter().zip(&st.counts).map(|(m, &c)| c as f64 * (m - mean) * (m - mean)).sum();
    let w: f64 = values.iter().zip(labels).map(|(v, &l)| (v - st.means[l]) * (v - st.means[l])).sum();
    if w <= 0.0 {
        return Ok(f64::MAX);
    }
    Ok((b / (st.k - 1) as f64) / (w / (n - st.k) as f64))
}

/// Mean silhouette with absolute distance. Singleton clusters score 0.
pub fn silhouette_mean(values: &[f64], labels: &[usize]) -> Result<f64> {
    let st = cluster_stats(values, labels, Error::SilhouetteUndefined)?;
    // per cluster: sorted members and prefix sums
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); st.k];
    for (&v, &l) in values.iter().zip(labels) {
        members[l].push(v);
    }
    let prefix: Vec<Vec<f64>> = members
        .iter_mut()
        .map(|m| {
            m.sort_by(f64::total_cmp);
            let mut p = Vec::with_capacity(m.len() + 1);
            p.push(0.0);
            for &x in m.iter() {
                p.push(p[p.len() - 1] + x);
            }
            p
        })
        .collect();
    let abs_sum = |c: usize, x: f64| -> f64 {
        let m = &members[c];
        let p = &prefix[c];
        let lo = m.partition_point(|&y| y < x);
        let n = m.len();
        (x * lo as f64 - p[lo]) + (p[n] - p[lo] - x * (n - lo) as f64)
    };
    let mut total = 0.0;
    for (&x, &l) in values.iter().zip(labels) {
        if st.counts[l] == 1 {
            continue;
        }
        let a = abs_sum(l, x) / (st.counts[l] - 1) as f64;
        let b = (0..st.k).filter(|&c| c != l).map(|c| abs_sum(c, x) / st.counts[c] as f64).fold(f64::INFINITY, f64::min);
        let den = a.max(b);
        if den > 0.0 {
            total += (b - a) / den;
        }
    }
    Ok(total / values.len() as f64)
}

/// Elbow of a within-cluster-SS curve: the `g` with the largest second
/// difference. Needs at least three points.
pub fn elbow_k(gs: &[usize], wcss: &[f64]) -> Option<usize> {
    if gs.len() != wcss.len() || gs.len() < 3 {
        return None;
    }
    let mut best: Option<(f64, usize)> = None;
    for i in 1..gs.len() - 1 {
        let d2 = wcss[i - 1] - 2.0 * wcss[i] + wcss[i + 1];
        if best.is_none_or(|(b, _)| d2 > b) {
            best = Some((d2, gs[i]));
        }
    }
    best.map(|(_, g)| g)
}

/// Cluster-count selection rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "lowercase"))]
pub enum KCriterion {
    #[default]
    Ch,
    Silhouette,
}

/// Outcome of [`select_k`].
#[derive(Clone, Debug)]
pub struct KSelection {
    pub k: usize,
    /// Clustering for the chosen `k`.
    pub clustering: KMeans,
    /// `(g, score, wcss)` for every evaluated `g`; empty when `g_min == g_max`.
    pub scores: Vec<(usize, f64, f64)>,
}

fn seed_for(seed: u64, g: usize) -> u64 {
    seed ^ ((g as u64) << 32)
}

/// Runs k-means for every `g` in `[g_min, g_max]` and returns the argmax of
/// the criterion, ties toward smaller `g`.
///
/// Requires `2 <= g_min <= g_max`, `g_max <= distinct(values)` and
/// `g_max < values.len()`.
pub fn select_k(values: &[f64], g_min: usize, g_max: usize, criterion: KCriterion, seed: u64) -> Result<KSelection> {
    check_finite(values)?;
    let distinct = distinct_count(values);
    if g_min < 2 || g_min > g_max || g_max > distinct || g_max >= values.len() {
        return Err(Error::InvalidKRange { min: g_min, max: g_max });
    }
    if g_min == g_max {
        let clustering = kmeans_1d(values, g_min, seed_for(seed, g_min))?;
        return Ok(KSelection { k: g_min, clustering, scores: Vec::new() });
    }
    let mut scores = Vec::new();
    let mut best: Option<(f64, KMeans)> = None;
    for g in g_min..=g_max {
        let km = kmeans_1d(values, g, seed_for(seed, g))?;
        let score = match criterion {
            KCriterion::Ch => ch_index(values, &km.labels)?,
            KCriterion::Silhouette => silhouette_mean(values, &km.labels)?,
        };
        scores.push((g, score, km.wcss));
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, km));
        }
    }
    let (_, clustering) = best.expect("nonempty range");
    Ok(KSelection { k: clustering.centroids.len(), clustering, scores })
}

/// Coordinate-to-cluster map learned on a fully measured wafer.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterMap {
    pub k: usize,
    /// `(lot, wafer)` of the calibration wafer.
    pub source: (u32, u32),
    pub assignment: BTreeMap<DieCoord, usize>,
    /// Per-cluster mean value, descending. May be empty for hand-built maps.
    pub centroids: Vec<f64>,
    /// Calibration geometry. When present, uncalibrated dies inside it take
    /// the label of the nearest calibrated die.
    pub geometry: Option<WaferGeometry>,
}

impl ClusterMap {
    pub fn new(k: usize, source: (u32, u32), assignment: BTreeMap<DieCoord, usize>) -> Result<Self> {
        let m = Self { k, source, assignment, centroids: Vec::new(), geometry: None };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("cluster map needs k >= 1".into()));
        }
        if self.assignment.is_empty() {
            return Err(Error::InvalidConfig("cluster map has no assignments".into()));
        }
        if let Some((c, l)) = self.assignment.iter().find(|(_, &l)| l >= self.k) {
            return Err(Error::InvalidConfig(alloc::format!("label {l} at ({}, {}) is not below k = {}", c.x, c.y, self.k)));
        }
        if !self.centroids.is_empty() && self.centroids.len() != self.k {
            return Err(Error::InvalidConfig("centroid count differs from k".into()));
        }
        Ok(())
    }

    /// Label of `c`, falling back to its nearest calibrated neighbour (ties
    /// toward smaller x, then y) when `c` lies inside the calibration geometry.
    pub fn label_of(&self, c: DieCoord) -> Result<usize> {
        if let Some(&l) = self.assignment.get(&c) {
            return Ok(l);
        }
        match &self.geometry {
            Some(g) if g.contains(c) => {
                let (_, l) = self
                    .assignment
                    .iter()
                    .map(|(&a, &l)| ((c.dist2(a), a.x, a.y), l))
                    .min_by(|(a, _), (b, _)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)))
                    .ok_or(Error::NotCalibrated { x: c.x, y: c.y })?;
                Ok(l)
            }
            _ => Err(Error::NotCalibrated { x: c.x, y: c.y }),
        }
    }
}

/// First step of the two-step method: value clustering of a complete wafer.
///
/// `g_max` is clipped to the number of distinct values and to `N - 1`.
pub fn two_step_calibrate(
    full: &MeasurementSet,
    g_min: usize,
    g_max: usize,
    criterion: KCriterion,
    seed: u64,
) -> Result<ClusterMap> {
    let missing = full.missing_count();
    if missing > 0 {
        return Err(Error::IncompleteCalibration { missing });
    }
    let values = full.values();
    let distinct = distinct_count(&values);
    if distinct < 2 {
        return Err(Error::DegenerateCalibration("wafer has a single distinct value"));
    }
    let hi = g_max.min(distinct).min(values.len() - 1);
    let lo = g_min.max(2);
    if lo > hi {
        return Err(Error::InvalidKRange { min: g_min, max: hi });
    }
    let sel = select_k(&values, lo, hi, criterion, seed)?;
    let source = full.records().first().map_or((0, 0), |r| (r.lot, r.wafer));
    let assignment = full.records().iter().zip(&sel.clustering.labels).map(|(r, &l)| (r.coord, l)).collect();
    Ok(ClusterMap {
        k: sel.k,
        source,
        assignment,
        centroids: sel.clustering.centroids,
        geometry: Some(full.geometry().clone()),
    })
}

/// Second step: one GP per calibrated cluster, grouped by coordinate label.
pub fn two_step_predict(map: &ClusterMap, train: &MeasurementSet, test: &[DieCoord], opts: &GpOptions) -> Result<GroupedPrediction> {
    map.validate()?;
    let train_labels = train.records().iter().map(|r| map.label_of(r.coord)).collect::<Result<Vec<_>>>()?;
    let test_labels = test.iter().map(|&c| map.label_of(c)).collect::<Result<Vec<_>>>()?;
    grouped_predict(&train.coords(), &train.values(), &train_labels, test, &test_labels, map.k, opts)
}
