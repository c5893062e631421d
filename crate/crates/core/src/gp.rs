//! RBF-kernel Gaussian-process regression over die coordinates.
//!
//! The kernel is `theta1 * exp(-|a - b|^2 / theta2)`; an observation-noise
//! nugget is added to the Gram diagonal. Training factors `Z + nugget I` once
//! and all predictions reuse the factor through triangular solves.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Cholesky, SquareMatrix};
use crate::math;
use crate::wafer::DieCoord;

/// Smallest nugget used in any solve.
pub const NUGGET_FLOOR: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// RBF hyperparameters plus observation-noise variance.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct KernelParams {
    /// Signal variance.
    pub theta1: f64,
    /// Squared length scale, in squared grid units.
    pub theta2: f64,
    /// Noise variance added to the Gram diagonal.
    pub nugget: f64,
}

impl KernelParams {
    pub fn new(theta1: f64, theta2: f64, nugget: f64) -> Result<Self> {
        let p = Self { theta1, theta2, nugget };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta1 > 0.0 && self.theta1.is_finite()) {
            return Err(Error::InvalidParams("theta1 must be positive and finite"));
        }
        if !(self.theta2 > 0.0 && self.theta2.is_finite()) {
            return Err(Error::InvalidParams("theta2 must be positive and finite"));
        }
        if !(self.nugget >= 0.0 && self.nugget.is_finite()) {
            return Err(Error::InvalidParams("nugget must be non-negative and finite"));
        }
        Ok(())
    }

    #[inline]
    fn kernel_d2(&self, d2: f64) -> f64 {
        self.theta1 * math::exp(-d2 / self.theta2)
    }
}

/// `theta1 * exp(-|a-b|^2 / theta2)`; the nugget is not included.
#[inline]
pub fn kernel_eval(params: &KernelParams, a: DieCoord, b: DieCoord) -> f64 {
    params.kernel_d2(a.dist2(b))
}

/// Kernel matrix over `xs` with `theta1 + nugget` on the diagonal.
pub fn gram_matrix(params: &KernelParams, xs: &[DieCoord]) -> SquareMatrix {
    gram_with_nugget(params, xs, params.nugget)
}

fn gram_with_nugget(params: &KernelParams, xs: &[DieCoord], nugget: f64) -> SquareMatrix {
    let n = xs.len();
    let mut z = SquareMatrix::zeros(n);
    for i in 0..n {
        z.set(i, i, params.theta1 + nugget);
        for j in 0..i {
            let k = kernel_eval(params, xs[i], xs[j]);
            z.set(i, j, k);
            z.set(j, i, k);
        }
    }
    z
}

/// Hyperparameter search and hierarchy settings.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(default))]
pub struct GpOptions {
    /// Coarse log-grid resolution for `(theta1, theta2, nugget)`.
    pub grid: [usize; 3],
    /// Golden-section tolerance in natural-log parameter units; `<= 0`
    /// disables refinement.
    pub refine_tol: f64,
    /// Maximum coordinate-wise refinement sweeps.
    pub max_sweeps: usize,
    pub nugget_floor: f64,
    /// Target variance at or below which `y` is treated as constant.
    pub var_floor: f64,
    /// Training points a site (or cluster) needs before it gets its own GP.
    pub min_train_per_site: usize,
    /// Predict undertrained groups with a fallback instead of failing.
    pub fallback: bool,
}

impl Default for GpOptions {
    fn default() -> Self {
        Self {
            grid: [8, 8, 5],
            refine_tol: 1e-3,
            max_sweeps: 8,
            nugget_floor: NUGGET_FLOOR,
            var_floor: 1e-12,
            min_train_per_site: 3,
            fallback: true,
        }
    }
}

/// Outcome of a hyperparameter search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperFit {
    pub params: KernelParams,
    pub log_likelihood: f64,
    /// Set when the targets were constant and a fixed fallback was returned.
    pub degenerate: bool,
}

/// Log marginal likelihood of zero-mean targets `y` under `params`, or
/// `-inf` when the Gram matrix cannot be factored.
pub fn log_marginal_likelihood(xs: &[DieCoord], y: &[f64], params: &KernelParams) -> f64 {
    let d2 = pairwise_d2(xs);
    LikelihoodSurface { d2: &d2, y, n: xs.len() }.eval(params.theta1, params.theta2, params.nugget)
}

fn pairwise_d2(xs: &[DieCoord]) -> Vec<f64> {
    let n = xs.len();
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..i {
            let d = xs[i].dist2(xs[j]);
            d2[i * n + j] = d;
            d2[j * n + i] = d;
        }
    }
    d2
}

struct LikelihoodSurface<'a> {
    d2: &'a [f64],
    y: &'a [f64],
    n: usize,
}

impl LikelihoodSurface<'_> {
    fn eval(&self, theta1: f64, theta2: f64, nugget: f64) -> f64 {
        let n = self.n;
        let z = SquareMatrix::from_fn(n, |i, j| {
            if i == j {
                theta1 + nugget
            } else {
                theta1 * math::exp(-self.d2[i * n + j] / theta2)
            }
        });
        match Cholesky::factor(&z) {
            Some(l) => {
                let w = l.solve_lower(self.y);
                let lml = -0.5 * dot(&w, &w) - 0.5 * l.log_det() - 0.5 * n as f64 * LN_2PI;
                if lml.is_finite() {
                    lml
                } else {
                    f64::NEG_INFINITY
                }
            }
            None => f64::NEG_INFINITY,
        }
    }
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![math::sqrt(lo * hi)];
    }
    let (a, b) = (math::ln(lo), math::ln(hi));
    (0..n).map(|k| math::exp(a + (b - a) * k as f64 / (n - 1) as f64)).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let hi = *m;
    if v.len() % 2 == 1 {
        hi
    } else {
        let lo = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Median squared distance over distinct training pairs (1 when all
/// coordinates coincide).
pub fn median_pairwise_d2(xs: &[DieCoord]) -> f64 {
    let mut d = Vec::with_capacity(xs.len() * xs.len().saturating_sub(1) / 2);
    for i in 0..xs.len() {
        for j in 0..i {
            d.push(xs[i].dist2(xs[j]));
        }
    }
    let m = median(d);
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

pub(crate) fn mean_and_variance(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Maximizes the log marginal likelihood of the mean-centered targets.
///
/// A coarse log-spaced grid over `theta1 in var(y)*[1e-3, 1e3]`,
/// `theta2 in m*[1e-1, 1e3]` (`m` the median squared pairwise distance) and
/// `nugget in var(y)*[1e-8, 1e-1]` picks a start point, which is then
/// polished by coordinate-wise golden-section search in log space. The
/// search is fully deterministic.
pub fn fit_hyperparameters(xs: &[DieCoord], ys: &[f64], opts: &GpOptions) -> Result<HyperFit> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch { left: xs.len(), right: ys.len() });
    }
    if xs.len() < 3 {
        return Err(Error::TooFewPoints { need: 3, got: xs.len() });
    }
    let (mean, var) = mean_and_variance(ys);
    let theta2_init = median_pairwise_d2(xs);
    let floor = opts.nugget_floor.max(0.0);
    if !(var > opts.var_floor) {
        let params = KernelParams { theta1: opts.var_floor.max(f64::MIN_POSITIVE), theta2: theta2_init, nugget: floor };
        return Ok(HyperFit { params, log_likelihood: f64::NAN, degenerate: true });
    }
    let centered: Vec<f64> = ys.iter().map(|v| v - mean).collect();
    let d2 = pairwise_d2(xs);
    let surface = LikelihoodSurface { d2: &d2, y: &centered, n: xs.len() };

    let nug_lo = (var * 1e-8).max(floor).max(f64::MIN_POSITIVE);
    let nug_hi = (var * 1e-1).max(nug_lo);
    let bounds = [(var * 1e-3, var * 1e3), (theta2_init * 1e-1, theta2_init * 1e3), (nug_lo, nug_hi)];
    let grids: [Vec<f64>; 3] = core::array::from_fn(|c| log_grid(bounds[c].0, bounds[c].1, opts.grid[c].max(1)));

    let mut best = [grids[0][0], grids[1][0], grids[2][0]];
    let mut best_val = f64::NEG_INFINITY;
    for &t1 in &grids[0] {
        for &t2 in &grids[1] {
            for &nug in &grids[2] {
                let v = surface.eval(t1, t2, nug);
                if v > best_val {
                    best_val = v;
                    best = [t1, t2, nug];
                }
            }
        }
    }
    if best_val == f64::NEG_INFINITY {
        return Err(Error::IllConditioned);
    }

    if opts.refine_tol > 0.0 {
        let mut log_best = best.map(math::ln);
        let log_bounds = bounds.map(|(lo, hi)| (math::ln(lo), math::ln(hi)));
        let mut steps: [f64; 3] = core::array::from_fn(|c| {
            let (lo, hi) = log_bounds[c];
            let n = opts.grid[c].max(1);
            if n > 1 && hi > lo {
                (hi - lo) / (n - 1) as f64
            } else {
                core::f64::consts::LN_10
            }
        });
        for _ in 0..opts.max_sweeps {
            let mut moved = 0.0f64;
            for c in 0..3 {
                let (lo, hi) = log_bounds[c];
                let a = (log_best[c] - steps[c]).max(lo);
                let b = (log_best[c] + steps[c]).min(hi);
                if b - a <= opts.refine_tol {
                    continue;
                }
                let f = |u: f64| {
                    let mut p = log_best.map(math::exp);
                    p[c] = math::exp(u);
                    surface.eval(p[0], p[1], p[2])
                };
                let (u, val) = golden_section_max(f, a, b, opts.refine_tol);
                if val > best_val {
                    moved = moved.max((u - log_best[c]).abs());
                    log_best[c] = u;
                    best_val = val;
                }
            }
            if moved <= opts.refine_tol {
                break;
            }
            steps = steps.map(|s| 0.5 * s);
        }
        best = log_best.map(math::exp);
    }

    let params = KernelParams { theta1: best[0], theta2: best[1], nugget: best[2].max(floor) };
    Ok(HyperFit { params, log_likelihood: best_val, degenerate: false })
}

/// Golden-section search for the maximum of `f` on `[a, b]`, stopping once
/// the bracket is narrower than `tol`.
fn golden_section_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while b - a > tol {
        if f1 >= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2);
        }
    }
    if f1 >= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Posterior mean and latent variance at a list of query coordinates.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PredictionResult {
    pub coords: Vec<DieCoord>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl PredictionResult {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Euclidean norm of the variance vector.
    pub fn variance_norm(&self) -> f64 {
        math::sqrt(self.variances.iter().map(|v| v * v).sum())
    }
}

/// Fitted GP: training inputs, the factor of `Z + nugget I` and
/// `alpha = (Z + nugget I)^-1 (y - prior_mean)`.
#[derive(Clone, Debug)]
pub struct GpModel {
    x_train: Vec<DieCoord>,
    y_train: Vec<f64>,
    prior_mean: f64,
    params: KernelParams,
    nugget: f64,
    factor: Cholesky,
    alpha: Vec<f64>,
}

impl GpModel {
    /// Zero-mean fit with the default nugget floor.
    pub fn fit(xs: &[DieCoord], ys: &[f64], params: KernelParams) -> Result<Self> {
        Self::fit_with(xs, ys, params, 0.0, NUGGET_FLOOR)
    }

    /// Fit with the training mean as constant prior mean.
    pub fn fit_centered(xs: &[DieCoord], ys: &[f64], params: KernelParams, nugget_floor: f64) -> Result<Self> {
        if ys.is_empty() {
            return Err(Error::EmptyInput("training set"));
        }
        let (mean, _) = mean_and_variance(ys);
        Self::fit_with(xs, ys, params, mean, nugget_floor)
    }

    /// Fit with an explicit prior mean and nugget floor. When the Gram matrix
    /// cannot be factored, the nugget is escalated tenfold per attempt up to
    /// `1e-2 * theta1`.
    pub fn fit_with(xs: &[DieCoord], ys: &[f64], params: KernelParams, prior_mean: f64, nugget_floor: f64) -> Result<Self> {
        params.validate()?;
        if xs.len() != ys.len() {
            return Err(Error::LengthMismatch { left: xs.len(), right: ys.len() });
        }
        if xs.is_empty() {
            return Err(Error::EmptyInput("training set"));
        }
        let ceiling = 1e-2 * params.theta1;
        let mut nugget = params.nugget.max(nugget_floor);
        let z = gram_with_nugget(&params, xs, 0.0);
        let factor = loop {
            let mut zn = z.clone();
            zn.add_diagonal(nugget);
            if let Some(f) = Cholesky::factor(&zn) {
                break f;
            }
            nugget = (nugget * 10.0).max(1e-10 * params.theta1);
            if nugget > ceiling {
                return Err(Error::IllConditioned);
            }
        };
        let centered: Vec<f64> = ys.iter().map(|v| v - prior_mean).collect();
        let alpha = factor.solve(&centered);
        Ok(Self { x_train: xs.to_vec(), y_train: ys.to_vec(), prior_mean, params, nugget, factor, alpha })
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    /// Nugget actually used in the factorization (after floor/escalation).
    pub fn effective_nugget(&self) -> f64 {
        self.nugget
    }

    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }

    pub fn x_train(&self) -> &[DieCoord] {
        &self.x_train
    }

    pub fn y_train(&self) -> &[f64] {
        &self.y_train
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn factor(&self) -> &Cholesky {
        &self.factor
    }

    /// Cross-covariance vector `z_*` between the training set and `x`.
    pub fn cross_covariance(&self, x: DieCoord) -> Vec<f64> {
        self.x_train.iter().map(|&t| kernel_eval(&self.params, t, x)).collect()
    }

    /// `L^-1 z_*`, the whitened cross-covariance.
    pub fn whitened(&self, x: DieCoord) -> Vec<f64> {
        self.factor.solve_lower(&self.cross_covariance(x))
    }

    /// Posterior mean `prior + z_*^T alpha` and latent variance
    /// `theta1 - z_*^T (Z + nugget I)^-1 z_*`, clamped at zero.
    pub fn predict_one(&self, x: DieCoord) -> (f64, f64) {
        let k = self.cross_covariance(x);
        let mu = self.prior_mean + dot(&k, &self.alpha);
        let w = self.factor.solve_lower(&k);
        let v = self.params.theta1 - dot(&w, &w);
        (mu, if v > 0.0 { v } else { 0.0 })
    }

    pub fn predict(&self, xs: &[DieCoord]) -> PredictionResult {
        let mut out = PredictionResult {
            coords: xs.to_vec(),
            means: Vec::with_capacity(xs.len()),
            variances: Vec::with_capacity(xs.len()),
        };
        for &x in xs {
            let (m, v) = self.predict_one(x);
            out.means.push(m);
            out.variances.push(v);
        }
        out
    }
}

/// Zero-mean GP fit (free-function form of [`GpModel::fit`]).
pub fn gp_fit(xs: &[DieCoord], ys: &[f64], params: KernelParams) -> Result<GpModel> {
    GpModel::fit(xs, ys, params)
}

/// Posterior prediction (free-function form of [`GpModel::predict`]).
pub fn gp_predict(model: &GpModel, xs: &[DieCoord]) -> Result<PredictionResult> {
    if xs.is_empty() {
        return Err(Error::EmptyInput("test coordinates"));
    }
    Ok(model.predict(xs))
}

/// Hyperparameter search, centered fit and prediction in one call.
///
/// With fewer than three training points no search is possible; the prior
/// `(max(var, var_floor), median pairwise d2, nugget_floor)` is used instead.
pub fn fit_predict(xs: &[DieCoord], ys: &[f64], test: &[DieCoord], opts: &GpOptions) -> Result<(HyperFit, PredictionResult)> {
    let fit = match fit_hyperparameters(xs, ys, opts) {
        Ok(f) => f,
        Err(Error::TooFewPoints { .. }) if !xs.is_empty() => prior_fit(xs, ys, opts),
        Err(e) => return Err(e),
    };
    let model = GpModel::fit_centered(xs, ys, fit.params, opts.nugget_floor)?;
    Ok((fit, model.predict(test)))
}

pub(crate) fn prior_fit(xs: &[DieCoord], ys: &[f64], opts: &GpOptions) -> HyperFit {
    let (_, var) = mean_and_variance(ys);
    let params = KernelParams {
        theta1: var.max(opts.var_floor).max(f64::MIN_POSITIVE),
        theta2: median_pairwise_d2(xs),
        nugget: opts.nugget_floor.max(0.0),
    };
    HyperFit { params, log_likelihood: f64::NAN, degenerate: true }
}
