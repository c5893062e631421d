//! Site-based hierarchical GP: one independent GP per probe site.
//!
//! Training and test dies are split by the site that probes them, each
//! group gets its own hyperparameter search and fit, and the per-group
//! predictions are written back in the caller's test order. The same
//! grouped machinery backs the value-clustered baseline in
//! [`crate::baselines`].

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::gp::{self, GpModel, GpOptions, HyperFit, PredictionResult};
use crate::wafer::{DieCoord, MeasurementSet, Tiling};

/// Training and test indices that belong to one group.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SiteGroup {
    /// Indices into the training records.
    pub train: Vec<usize>,
    /// Indices into the test coordinates.
    pub test: Vec<usize>,
}

/// Training/test split by site.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SitePartition {
    pub site_count: usize,
    pub groups: Vec<SiteGroup>,
}

impl SitePartition {
    /// Sites with no training data at all.
    pub fn empty_train_sites(&self) -> Vec<usize> {
        self.groups.iter().enumerate().filter(|(_, g)| g.train.is_empty()).map(|(s, _)| s).collect()
    }

    /// Sites that need a prediction but have fewer than `min_train` points.
    pub fn undertrained_sites(&self, min_train: usize) -> Vec<usize> {
        self.groups
            .iter()
            .enumerate()
            .filter(|(_, g)| !g.test.is_empty() && g.train.len() < min_train)
            .map(|(s, _)| s)
            .collect()
    }
}

/// Groups training records and test coordinates by site.
pub fn partition_by_site(train: &MeasurementSet, test: &[DieCoord], tiling: &Tiling) -> Result<SitePartition> {
    let s_count = tiling.layout().site_count();
    let mut groups = vec![SiteGroup::default(); s_count];
    for (i, r) in train.records().iter().enumerate() {
        let s = tiling.site_of(r.coord)?;
        groups[s.0].train.push(i);
    }
    for (i, &c) in test.iter().enumerate() {
        let s = tiling.site_of(c)?;
        groups[s.0].test.push(i);
    }
    Ok(SitePartition { site_count: s_count, groups })
}

/// How one group was predicted.
#[derive(Clone, Debug, PartialEq)]
pub enum GroupModel {
    /// No test points; nothing fitted.
    Idle,
    /// Own GP with the fitted hyperparameters.
    Gp(HyperFit),
    /// Too few points for a GP: the group's own training mean.
    GroupMean { n_train: usize },
    /// No training points: the global training mean.
    GlobalMean,
}

impl GroupModel {
    pub fn is_fallback(&self) -> bool {
        matches!(self, GroupModel::GroupMean { .. } | GroupModel::GlobalMean)
    }
}

/// Concatenated prediction plus per-group bookkeeping.
#[derive(Clone, Debug)]
pub struct GroupedPrediction {
    pub prediction: PredictionResult,
    pub groups: Vec<GroupModel>,
    /// Whole-training-set fit, computed only when some group fell back.
    pub global: Option<HyperFit>,
}

impl GroupedPrediction {
    pub fn fallback_groups(&self) -> Vec<usize> {
        self.groups.iter().enumerate().filter(|(_, g)| g.is_fallback()).map(|(i, _)| i).collect()
    }

    /// Hyperparameters of groups that have their own GP.
    pub fn group_params(&self) -> Vec<Option<gp::KernelParams>> {
        self.groups
            .iter()
            .map(|g| match g {
                GroupModel::Gp(f) => Some(f.params),
                _ => None,
            })
            .collect()
    }
}

/// Predicts every test coordinate with the GP of its own group.
///
/// Labels must lie in `[0, n_groups)`. Groups with test points but fewer
/// than `opts.min_train_per_site` training points fall back to their own
/// training mean (or the global mean when empty) with the globally fitted
/// `theta1` as variance; with `opts.fallback == false` they are an error.
pub fn grouped_predict(
    train_x: &[DieCoord],
    train_y: &[f64],
    train_labels: &[usize],
    test_x: &[DieCoord],
    test_labels: &[usize],
    n_groups: usize,
    opts: &GpOptions,
) -> Result<GroupedPrediction> {
    if train_x.len() != train_y.len() || train_x.len() != train_labels.len() {
        return Err(Error::LengthMismatch { left: train_x.len(), right: train_y.len().min(train_labels.len()) });
    }
    if test_x.len() != test_labels.len() {
        return Err(Error::LengthMismatch { left: test_x.len(), right: test_labels.len() });
    }
    let mut members = vec![SiteGroup::default(); n_groups];
    for (i, &l) in train_labels.iter().enumerate() {
        members.get_mut(l).ok_or(Error::InvalidConfig(alloc::format!("label {l} out of range")))?.train.push(i);
    }
    for (i, &l) in test_labels.iter().enumerate() {
        members.get_mut(l).ok_or(Error::InvalidConfig(alloc::format!("label {l} out of range")))?.test.push(i);
    }

    let m = test_x.len();
    let mut out = PredictionResult { coords: test_x.to_vec(), means: vec![0.0; m], variances: vec![0.0; m] };
    let mut models = vec![GroupModel::Idle; n_groups];
    let mut global: Option<HyperFit> = None;

    for (g, grp) in members.iter().enumerate() {
        if grp.test.is_empty() {
            continue;
        }
        if grp.train.len() < opts.min_train_per_site.max(1) {
            if !opts.fallback {
                return Err(Error::UndertrainedSite(g));
            }
            if train_x.is_empty() {
                return Err(Error::EmptyInput("training set"));
            }
            let gfit = match global {
                Some(f) => f,
                None => {
                    let f = global_fit(train_x, train_y, opts)?;
                    global = Some(f);
                    f
                }
            };
            let (mean, model) = if grp.train.is_empty() {
                (gp::mean_and_variance(train_y).0, GroupModel::GlobalMean)
            } else {
                let ys: Vec<f64> = grp.train.iter().map(|&i| train_y[i]).collect();
                (gp::mean_and_variance(&ys).0, GroupModel::GroupMean { n_train: ys.len() })
            };
            for &t in &grp.test {
                out.means[t] = mean;
                out.variances[t] = gfit.params.theta1;
            }
            models[g] = model;
            continue;
        }
        let xs: Vec<DieCoord> = grp.train.iter().map(|&i| train_x[i]).collect();
        let ys: Vec<f64> = grp.train.iter().map(|&i| train_y[i]).collect();
        let tx: Vec<DieCoord> = grp.test.iter().map(|&i| test_x[i]).collect();
        let (fit, pred) = gp::fit_predict(&xs, &ys, &tx, opts)?;
        for (k, &t) in grp.test.iter().enumerate() {
            out.means[t] = pred.means[k];
            out.variances[t] = pred.variances[k];
        }
        models[g] = GroupModel::Gp(fit);
    }
    Ok(GroupedPrediction { prediction: out, groups: models, global })
}

fn global_fit(xs: &[DieCoord], ys: &[f64], opts: &GpOptions) -> Result<HyperFit> {
    match gp::fit_hyperparameters(xs, ys, opts) {
        Ok(f) => Ok(f),
        Err(Error::TooFewPoints { .. }) => Ok(gp::prior_fit(xs, ys, opts)),
        Err(e) => Err(e),
    }
}

/// Builds a centered GP for `(xs, ys)` with fixed hyperparameters.
pub(crate) fn frozen_model(xs: &[DieCoord], ys: &[f64], params: gp::KernelParams, opts: &GpOptions) -> Result<GpModel> {
    GpModel::fit_centered(xs, ys, params, opts.nugget_floor)
}

/// Site-based hierarchical GP regression over the training set's own tiling.
///
/// The i-th output row always belongs to `test[i]`.
pub fn hgpr(train: &MeasurementSet, test: &[DieCoord], opts: &GpOptions) -> Result<GroupedPrediction> {
    let tiling = train.tiling()?;
    let labels: Vec<usize> = train.records().iter().map(|r| r.site.0).collect();
    let test_labels = test.iter().map(|&c| tiling.site_of(c).map(|s| s.0)).collect::<Result<Vec<_>>>()?;
    grouped_predict(
        &train.coords(),
        &train.values(),
        &labels,
        test,
        &test_labels,
        tiling.layout().site_count(),
        opts,
    )
}
