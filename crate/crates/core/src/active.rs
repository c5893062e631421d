//! Touchdown-granular sequential sampling.
//!
//! A campaign starts from one seeded random touchdown. Afterwards either a
//! random untouched anchor or the anchor whose hypothetical measurement
//! shrinks the posterior variance vector the most is probed next.
//!
//! With frozen hyperparameters the posterior variance does not depend on the
//! target values, and one touchdown adds at most one die per site, so the
//! variance change is an exact rank-one update of each touched site's
//! posterior covariance: `v_p(u) = v(u) - c(u,a)^2 / (v(a) + nugget)`.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gp::{self, kernel_eval, GpOptions, KernelParams, PredictionResult};
use crate::hier::{self, frozen_model, GroupModel, GroupedPrediction};
use crate::linalg::{dot, SquareMatrix};
use crate::math;
use crate::metrics;
use crate::wafer::{DieCoord, Measurement, MeasurementSet, SiteId, Tiling};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "lowercase"))]
pub enum Strategy {
    Active,
    Random,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Active => "active",
            Strategy::Random => "random",
        }
    }
}

/// How candidates are scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "lowercase"))]
pub enum ScoringMode {
    /// Hyperparameters fixed at the last real fit; exact rank-one updates.
    #[default]
    Frozen,
    /// Full hierarchical refit with pseudo-measurements per candidate.
    Refit,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CampaignOptions {
    pub gp: GpOptions,
    pub scoring: ScoringMode,
    /// Stop once the variance norm over unmeasured dies drops to this value.
    pub stop_var_norm: Option<f64>,
}

/// Measured dies, untouched anchors and the current site-hier prediction
/// over every unmeasured die of the population.
#[derive(Clone, Debug)]
pub struct CampaignState {
    tiling: Tiling,
    population: BTreeSet<DieCoord>,
    measured: MeasurementSet,
    remaining: BTreeSet<DieCoord>,
    test: Vec<DieCoord>,
    test_pos: BTreeMap<DieCoord, usize>,
    prediction: GroupedPrediction,
    step: usize,
    opts: CampaignOptions,
}

impl CampaignState {
    /// `population` is the set of dies that exist (the complete wafer minus
    /// faulty dies). The step count is the number of anchors with at least
    /// one measured die.
    pub fn new(measured: MeasurementSet, population: &[DieCoord], opts: CampaignOptions) -> Result<Self> {
        if measured.is_empty() {
            return Err(Error::EmptyInput("measured set"));
        }
        let tiling = measured.tiling()?;
        let population: BTreeSet<DieCoord> = population.iter().copied().collect();
        if let Some(r) = measured.records().iter().find(|r| !population.contains(&r.coord)) {
            return Err(Error::InvalidMeasurements(alloc::format!(
                "measured die ({}, {}) is not in the population",
                r.coord.x,
                r.coord.y
            )));
        }
        let mut state = Self {
            tiling,
            population,
            measured,
            remaining: BTreeSet::new(),
            test: Vec::new(),
            test_pos: BTreeMap::new(),
            prediction: GroupedPrediction {
                prediction: PredictionResult { coords: Vec::new(), means: Vec::new(), variances: Vec::new() },
                groups: Vec::new(),
                global: None,
            },
            step: 0,
            opts,
        };
        let mut touched = BTreeSet::new();
        for r in state.measured.records() {
            touched.insert(state.tiling.anchor_of(r.coord)?);
        }
        state.step = touched.len();
        state.refresh()?;
        Ok(state)
    }

    fn refresh(&mut self) -> Result<()> {
        self.test = self.population.iter().copied().filter(|c| !self.measured.contains(*c)).collect();
        self.test_pos = self.test.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        self.remaining = BTreeSet::new();
        for &c in &self.test {
            self.remaining.insert(self.tiling.anchor_of(c)?);
        }
        self.prediction = hier::hgpr(&self.measured, &self.test, &self.opts.gp)?;
        Ok(())
    }

    pub fn tiling(&self) -> &Tiling {
        &self.tiling
    }

    pub fn measured(&self) -> &MeasurementSet {
        &self.measured
    }

    /// Anchors that still cover at least one unmeasured die.
    pub fn remaining(&self) -> &BTreeSet<DieCoord> {
        &self.remaining
    }

    /// Unmeasured population dies, row-major.
    pub fn test_coords(&self) -> &[DieCoord] {
        &self.test
    }

    pub fn prediction(&self) -> &GroupedPrediction {
        &self.prediction
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn options(&self) -> &CampaignOptions {
        &self.opts
    }

    /// Unmeasured population dies under `anchor`.
    pub fn candidate_dies(&self, anchor: DieCoord) -> Result<Vec<(SiteId, DieCoord)>> {
        if !self.remaining.contains(&anchor) {
            return Err(Error::AnchorUnavailable { x: anchor.x, y: anchor.y });
        }
        Ok(self.tiling.dies_of(anchor).into_iter().filter(|(_, c)| self.test_pos.contains_key(c)).collect())
    }

    /// Measures every unmeasured die of `anchor` using the values in `truth`
    /// and refits the prediction.
    pub fn apply_touchdown(&mut self, anchor: DieCoord, truth: &MeasurementSet) -> Result<()> {
        for (_, c) in self.candidate_dies(anchor)? {
            let r = truth.get(c).ok_or(Error::NotCalibrated { x: c.x, y: c.y })?;
            self.measured.push(*r)?;
        }
        self.step += 1;
        self.refresh()
    }

    /// Variance norm over the unmeasured dies.
    pub fn var_norm(&self) -> f64 {
        self.prediction.prediction.variance_norm()
    }

    fn pseudo_points(&self, dies: &[(SiteId, DieCoord)]) -> Vec<(DieCoord, f64)> {
        dies.iter().map(|&(_, c)| (c, self.prediction.prediction.means[self.test_pos[&c]])).collect()
    }
}

/// Score of one candidate touchdown.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateScore {
    pub anchor: DieCoord,
    /// Euclidean norm of the variance decrease over the surviving test dies.
    pub delta_var: f64,
    /// Dies the candidate would measure, with the predicted means standing in
    /// for the measurement.
    pub pseudo_points: Vec<(DieCoord, f64)>,
}

struct SiteCov {
    index: BTreeMap<DieCoord, usize>,
    cov: SquareMatrix,
    nugget: f64,
}

/// Posterior covariances of every site's unmeasured dies at frozen
/// hyperparameters. Sites without a GP of their own (too few points) use the
/// geometric mean of the fitted sites' hyperparameters.
pub struct FrozenScorer<'a> {
    state: &'a CampaignState,
    sites: Vec<Option<SiteCov>>,
}

fn geometric_mean_params(ps: &[KernelParams], floor: f64) -> KernelParams {
    let n = ps.len() as f64;
    let g = |f: &dyn Fn(&KernelParams) -> f64| math::exp(ps.iter().map(|p| math::ln(f(p).max(f64::MIN_POSITIVE))).sum::<f64>() / n);
    KernelParams { theta1: g(&|p| p.theta1), theta2: g(&|p| p.theta2), nugget: g(&|p| p.nugget.max(floor)) }
}

impl<'a> FrozenScorer<'a> {
    pub fn new(state: &'a CampaignState) -> Result<Self> {
        let opts = &state.opts.gp;
        let s_count = state.tiling.layout().site_count();
        let mut train: Vec<(Vec<DieCoord>, Vec<f64>)> = (0..s_count).map(|_| (Vec::new(), Vec::new())).collect();
        for r in state.measured.records() {
            train[r.site.0].0.push(r.coord);
            train[r.site.0].1.push(r.value);
        }
        let mut test: Vec<Vec<DieCoord>> = (0..s_count).map(|_| Vec::new()).collect();
        for &c in &state.test {
            test[state.tiling.site_of(c)?.0].push(c);
        }
        let fitted: Vec<KernelParams> = state
            .prediction
            .groups
            .iter()
            .filter_map(|g| match g {
                GroupModel::Gp(f) => Some(f.params),
                _ => None,
            })
            .collect();
        let template = if !fitted.is_empty() {
            geometric_mean_params(&fitted, opts.nugget_floor)
        } else {
            match state.prediction.global {
                Some(f) => f.params,
                None => {
                    let xs = state.measured.coords();
                    let ys = state.measured.values();
                    match gp::fit_hyperparameters(&xs, &ys, opts) {
                        Ok(f) => f.params,
                        Err(Error::TooFewPoints { .. }) => gp::prior_fit(&xs, &ys, opts).params,
                        Err(e) => return Err(e),
                    }
                }
            }
        };
        let mut sites = Vec::with_capacity(s_count);
        for s in 0..s_count {
            let t = &test[s];
            if t.is_empty() {
                sites.push(None);
                continue;
            }
            let params = match state.prediction.groups.get(s) {
                Some(GroupModel::Gp(f)) => f.params,
                _ => template,
            };
            let (xs, ys) = &train[s];
            let (cov, nugget) = if xs.is_empty() {
                let cov = SquareMatrix::from_fn(t.len(), |i, j| kernel_eval(&params, t[i], t[j]));
                (cov, params.nugget.max(opts.nugget_floor))
            } else {
                let model = frozen_model(xs, ys, params, opts)?;
                let w: Vec<Vec<f64>> = t.iter().map(|&c| model.whitened(c)).collect();
                let mut cov = SquareMatrix::zeros(t.len());
                for i in 0..t.len() {
                    for j in 0..=i {
                        let v = kernel_eval(&params, t[i], t[j]) - dot(&w[i], &w[j]);
                        cov.set(i, j, v);
                        cov.set(j, i, v);
                    }
                }
                (cov, model.effective_nugget())
            };
            let index = t.iter().enumerate().map(|(i, &c)| (c, i)).collect();
            sites.push(Some(SiteCov { index, cov, nugget }));
        }
        Ok(Self { state, sites })
    }

    pub fn score(&self, anchor: DieCoord) -> Result<CandidateScore> {
        let dies = self.state.candidate_dies(anchor)?;
        let mut sum = 0.0;
        for &(s, c) in &dies {
            let Some(sc) = &self.sites[s.0] else { continue };
            let i = sc.index[&c];
            let denom = sc.cov.get(i, i).max(0.0) + sc.nugget;
            if !(denom > 0.0) {
                continue;
            }
            let row = sc.cov.row(i);
            for (u, &cu) in row.iter().enumerate() {
                if u != i {
                    let r = cu * cu / denom;
                    sum += r * r;
                }
            }
        }
        Ok(CandidateScore { anchor, delta_var: math::sqrt(sum), pseudo_points: self.state.pseudo_points(&dies) })
    }
}

/// Literal scoring: add the pseudo-measurements, rerun the hierarchical
/// regression with a fresh hyperparameter search and compare variances on
/// the dies that stay unmeasured.
pub fn score_candidate_refit(state: &CampaignState, anchor: DieCoord) -> Result<CandidateScore> {
    let dies = state.candidate_dies(anchor)?;
    let pseudo = state.pseudo_points(&dies);
    let (lot, wafer) = state.measured.records().first().map_or((1, 1), |r| (r.lot, r.wafer));
    let mut train = state.measured.clone();
    for (&(site, coord), &(_, value)) in dies.iter().zip(&pseudo) {
        train.push(Measurement { coord, site, value, lot, wafer })?;
    }
    let leaving: BTreeSet<DieCoord> = dies.iter().map(|&(_, c)| c).collect();
    let keep: Vec<usize> = (0..state.test.len()).filter(|&i| !leaving.contains(&state.test[i])).collect();
    let test: Vec<DieCoord> = keep.iter().map(|&i| state.test[i]).collect();
    let after = hier::hgpr(&train, &test, &state.opts.gp)?;
    let v = &state.prediction.prediction.variances;
    let sum: f64 = keep.iter().zip(&after.prediction.variances).map(|(&i, vp)| (v[i] - vp) * (v[i] - vp)).sum();
    Ok(CandidateScore { anchor, delta_var: math::sqrt(sum), pseudo_points: pseudo })
}

/// Scores one candidate with the state's scoring mode.
pub fn score_candidate(state: &CampaignState, anchor: DieCoord) -> Result<CandidateScore> {
    match state.opts.scoring {
        ScoringMode::Frozen => FrozenScorer::new(state)?.score(anchor),
        ScoringMode::Refit => score_candidate_refit(state, anchor),
    }
}

/// Every remaining anchor with its score, in anchor order.
pub fn score_all(state: &CampaignState) -> Result<Vec<CandidateScore>> {
    match state.opts.scoring {
        ScoringMode::Frozen => {
            let scorer = FrozenScorer::new(state)?;
            state.remaining.iter().map(|&a| scorer.score(a)).collect()
        }
        ScoringMode::Refit => state.remaining.iter().map(|&a| score_candidate_refit(state, a)).collect(),
    }
}

/// Anchor with the largest score; ties go to the smaller `(y, x)` anchor.
pub fn select_next_touchdown(state: &CampaignState) -> Result<DieCoord> {
    let mut it = state.remaining.iter();
    let first = *it.next().ok_or(Error::CampaignComplete)?;
    if it.next().is_none() {
        return Ok(first);
    }
    let mut best: Option<(f64, DieCoord)> = None;
    for s in score_all(state)? {
        if best.is_none_or(|(b, _)| s.delta_var > b) {
            best = Some((s.delta_var, s.anchor));
        }
    }
    Ok(best.expect("nonempty").1)
}

/// One row of a campaign log, written after each touchdown.
#[derive(Clone, Debug, PartialEq)]
pub struct CampaignRow {
    /// Touchdowns performed so far (1-based).
    pub step: usize,
    pub anchor: DieCoord,
    /// Over unmeasured dies; 0 once everything is measured.
    pub mean_abs_delta: f64,
    pub max_abs_delta: f64,
    pub var_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CampaignLog {
    pub strategy: Strategy,
    pub seed: u64,
    pub rows: Vec<CampaignRow>,
    /// The budget exceeded the number of touchdowns available.
    pub truncated: bool,
}

impl CampaignLog {
    /// First step whose mean |delta| is at or below `threshold`.
    pub fn steps_to_reach(&self, threshold: f64) -> Option<usize> {
        self.rows.iter().find(|r| r.mean_abs_delta <= threshold).map(|r| r.step)
    }
}

/// Runs a campaign on a complete wafer. Both strategies draw the first
/// touchdown from the same seeded stream, so equal seeds share it.
pub fn run_campaign(
    truth: &MeasurementSet,
    strategy: Strategy,
    budget: usize,
    seed: u64,
    opts: &CampaignOptions,
) -> Result<CampaignLog> {
    if budget == 0 {
        return Err(Error::InvalidConfig("budget must be at least 1".into()));
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput("truth wafer"));
    }
    let d_spec = metrics::d_spec_of(&truth.values())?;
    let tiling = truth.tiling()?;
    let mut anchors = BTreeSet::new();
    for r in truth.records() {
        anchors.insert(tiling.anchor_of(r.coord)?);
    }
    let total = anchors.len();
    let truncated = budget > total;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = *anchors.iter().nth(rng.random_range(0..total)).expect("index in range");
    let population = truth.coords();
    let dies: BTreeSet<DieCoord> = tiling.dies_of(first).into_iter().map(|(_, c)| c).collect();
    let measured = truth.filter(|r| dies.contains(&r.coord));
    let mut state = CampaignState::new(measured, &population, opts.clone())?;
    let mut rows = Vec::new();
    let mut anchor = first;
    loop {
        let row = log_row(&state, truth, anchor, d_spec)?;
        let var_norm = row.var_norm;
        rows.push(row);
        if rows.len() >= budget || state.remaining.is_empty() {
            break;
        }
        if opts.stop_var_norm.is_some_and(|t| var_norm <= t) {
            break;
        }
        anchor = match strategy {
            Strategy::Active => select_next_touchdown(&state)?,
            Strategy::Random => {
                let n = state.remaining.len();
                *state.remaining.iter().nth(rng.random_range(0..n)).expect("index in range")
            }
        };
        state.apply_touchdown(anchor, truth)?;
    }
    Ok(CampaignLog { strategy, seed, rows, truncated })
}

fn log_row(state: &CampaignState, truth: &MeasurementSet, anchor: DieCoord, d_spec: f64) -> Result<CampaignRow> {
    let pred = &state.prediction.prediction;
    let y: Vec<f64> = state.test.iter().map(|c| truth.get(*c).map(|r| r.value).expect("test dies come from truth")).collect();
    let rep = metrics::delta_error(pred, &y, d_spec)?;
    Ok(CampaignRow {
        step: state.step,
        anchor,
        mean_abs_delta: rep.mean_abs,
        max_abs_delta: rep.max_abs,
        var_norm: pred.variance_norm(),
    })
}

/// `(||v|| + ||mu - y||^2, ||v||, ||mu - y||^2)` with Euclidean norms.
pub fn mse_decomposition(pred: &PredictionResult, truth: &[f64]) -> Result<(f64, f64, f64)> {
    if pred.means.len() != truth.len() {
        return Err(Error::LengthMismatch { left: pred.means.len(), right: truth.len() });
    }
    let var = math::sqrt(pred.variances.iter().map(|v| v * v).sum());
    let bias: f64 = pred.means.iter().zip(truth).map(|(m, y)| (m - y) * (m - y)).sum();
    Ok((var + bias, var, bias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wafer::{TouchdownLayout, WaferGeometry};
    use alloc::vec;

    fn toy_wafer(w: i32, h: i32, layout: TouchdownLayout) -> MeasurementSet {
        let g = WaferGeometry::rect(0, 0, w, h).unwrap();
        let recs = g
            .dies()
            .into_iter()
            .map(|c| Measurement {
                coord: c,
                site: layout.lattice_site(c),
                value: 0.1 * f64::from(c.x) + 0.05 * f64::from(c.y) * f64::from(c.y),
                lot: 1,
                wafer: 1,
            })
            .collect();
        MeasurementSet::new(recs, layout, g).unwrap()
    }

    #[test]
    fn mse_examples() {
        let p = PredictionResult { coords: vec![DieCoord::new(0, 0); 2], means: vec![1.0, 2.0], variances: vec![3.0, 4.0] };
        assert_eq!(mse_decomposition(&p, &[1.0, 2.0]).unwrap(), (5.0, 5.0, 0.0));
        let z = PredictionResult { coords: vec![DieCoord::new(0, 0)], means: vec![1.0], variances: vec![0.0] };
        assert_eq!(mse_decomposition(&z, &[1.0]).unwrap(), (0.0, 0.0, 0.0));
        assert!(mse_decomposition(&z, &[]).is_err());
    }

    #[test]
    fn single_candidate_is_returned() {
        let truth = toy_wafer(3, 1, TouchdownLayout::single_site());
        let measured = truth.filter(|r| r.coord.x < 2);
        let st = CampaignState::new(measured, &truth.coords(), CampaignOptions::default()).unwrap();
        assert_eq!(st.remaining().len(), 1);
        assert_eq!(select_next_touchdown(&st).unwrap(), DieCoord::new(2, 0));
    }

    #[test]
    fn measured_anchor_is_rejected() {
        let truth = toy_wafer(4, 1, TouchdownLayout::single_site());
        let measured = truth.filter(|r| r.coord.x == 0);
        let st = CampaignState::new(measured, &truth.coords(), CampaignOptions::default()).unwrap();
        assert_eq!(score_candidate(&st, DieCoord::new(0, 0)).unwrap_err(), Error::AnchorUnavailable { x: 0, y: 0 });
    }

    #[test]
    fn budget_one_logs_match() {
        let truth = toy_wafer(8, 8, TouchdownLayout::block(2, 2).unwrap());
        let opts = CampaignOptions::default();
        let a = run_campaign(&truth, Strategy::Active, 1, 9, &opts).unwrap();
        let r = run_campaign(&truth, Strategy::Random, 1, 9, &opts).unwrap();
        assert_eq!(a.rows, r.rows);
        assert_eq!(a.rows.len(), 1);
        assert_eq!(a.rows[0].step, 1);
    }

    #[test]
    fn exhausting_budget_truncates() {
        let truth = toy_wafer(4, 4, TouchdownLayout::block(2, 2).unwrap());
        let log = run_campaign(&truth, Strategy::Random, 10, 3, &CampaignOptions::default()).unwrap();
        assert!(log.truncated);
        assert_eq!(log.rows.len(), 4);
        let last = log.rows.last().unwrap();
        assert_eq!((last.mean_abs_delta, last.max_abs_delta, last.var_norm), (0.0, 0.0, 0.0));
    }

    #[test]
    fn variance_norm_never_grows_with_frozen_scores() {
        let truth = toy_wafer(8, 8, TouchdownLayout::single_site());
        let measured = truth.filter(|r| r.coord == DieCoord::new(1, 1) || r.coord == DieCoord::new(2, 5));
        let st = CampaignState::new(measured, &truth.coords(), CampaignOptions::default()).unwrap();
        for s in score_all(&st).unwrap() {
            assert!(s.delta_var.is_finite() && s.delta_var >= 0.0);
            assert_eq!(s.pseudo_points.len(), 1);
        }
    }
}
