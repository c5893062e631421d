//! Synthetic wafers: smooth bowl-shaped trend, per-site offsets that dominate
//! the spatial variation, per-site noise and lot-dependent site drift.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::wafer::{Measurement, MeasurementSet, TouchdownLayout, WaferGeometry};

/// `a rho^2 + b dx + c dy + d` with `(dx, dy)` measured from the wafer center.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Trend {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Trend {
    pub const ZERO: Trend = Trend { a: 0.0, b: 0.0, c: 0.0, d: 0.0 };

    pub fn eval(&self, dx: f64, dy: f64) -> f64 {
        self.a * (dx * dx + dy * dy) + self.b * dx + self.c * dy + self.d
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SynthConfig {
    pub geometry: WaferGeometry,
    pub layout: TouchdownLayout,
    pub trend: Trend,
    /// One offset per site.
    pub site_offsets: Vec<f64>,
    /// Noise standard deviation per site.
    pub site_sigma: Vec<f64>,
    /// Lot number to per-site offset change. Lots not listed have no drift.
    #[cfg_attr(feature = "serde", serde(default))]
    pub drift: BTreeMap<u32, Vec<f64>>,
    /// Fraction of dies removed at random (faulty dies).
    #[cfg_attr(feature = "serde", serde(default))]
    pub dropout: f64,
    pub seed: u64,
}

// Level index of every site of the staggered 16-site card. Sites 3, 9 and 14
// share level 6 so that the lot-1 value clusters lump them together.
const SITE_LEVEL: [usize; 16] = [9, 2, 12, 6, 5, 0, 10, 3, 13, 6, 7, 1, 11, 4, 6, 8];
const LEVELS: usize = 14;
const LEVEL_SPAN: f64 = 0.92;
const DRIFT_SITES: [(usize, f64); 3] = [(3, 0.36), (9, -0.34), (14, 0.52)];

fn default_offsets() -> Vec<f64> {
    SITE_LEVEL.iter().map(|&l| l as f64 * LEVEL_SPAN / (LEVELS - 1) as f64).collect()
}

// Drift ramps in from lot 3 and reaches full size at lot 6.
fn default_drift(sites: usize) -> BTreeMap<u32, Vec<f64>> {
    let mut m = BTreeMap::new();
    for lot in 3..=6u32 {
        let f = f64::from(lot - 2) / 4.0;
        let mut d = vec![0.0; sites];
        for &(s, shift) in &DRIFT_SITES {
            d[s] = shift * f;
        }
        m.insert(lot, d);
    }
    m
}

impl SynthConfig {
    fn preset(cx: i32, cy: i32, r: i32) -> Self {
        let layout = TouchdownLayout::staggered16();
        let s = layout.site_count();
        let rf = f64::from(r);
        Self {
            geometry: WaferGeometry::disc(cx, cy, r).expect("positive radius"),
            layout,
            trend: Trend { a: 0.027 / (rf * rf), b: 0.0045 / rf, c: 0.0, d: 0.02 },
            site_offsets: default_offsets(),
            site_sigma: vec![0.004; s],
            drift: default_drift(s),
            dropout: 0.0,
            seed: 1,
        }
    }

    /// About 6,000 dies and 600 touchdowns.
    pub fn default_wafer() -> Self {
        Self::preset(48, 48, 44)
    }

    /// About 600 dies; for quick runs.
    pub fn small() -> Self {
        Self::preset(16, 16, 14)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let s = self.layout.site_count();
        if self.site_offsets.len() != s {
            return Err(Error::InvalidConfig(alloc::format!("{} site offsets for {s} sites", self.site_offsets.len())));
        }
        if self.site_sigma.len() != s {
            return Err(Error::InvalidConfig(alloc::format!("{} site sigmas for {s} sites", self.site_sigma.len())));
        }
        if self.site_offsets.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite site offset".into()));
        }
        if self.site_sigma.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig("site sigma must be finite and nonnegative".into()));
        }
        for (lot, d) in &self.drift {
            if d.len() != s || d.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig(alloc::format!("drift for lot {lot} needs {s} finite entries")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Noise-free offset of `site` in `lot`.
    pub fn site_level(&self, site: usize, lot: u32) -> f64 {
        self.site_offsets[site] + self.drift.get(&lot).map_or(0.0, |d| d[site])
    }
}

/// Complete (up to dropout) synthetic wafer. The random stream depends only
/// on `(seed, lot, wafer)`.
pub fn generate_wafer(cfg: &SynthConfig, lot: u32, wafer: u32) -> Result<MeasurementSet> {
    cfg.validate()?;
    if lot == 0 || wafer == 0 {
        return Err(Error::InvalidConfig("lot and wafer numbers start at 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream((u64::from(lot) << 32) | u64::from(wafer));
    let noise: Vec<Normal<f64>> = cfg
        .site_sigma
        .iter()
        .map(|&s| Normal::new(0.0, s).map_err(|_| Error::InvalidConfig("bad sigma".into())))
        .collect::<Result<_>>()?;
    let (cx, cy) = cfg.geometry.center();
    let mut set = MeasurementSet::empty(cfg.layout.clone(), cfg.geometry.clone());
    for c in cfg.geometry.dies() {
        let site = cfg.layout.lattice_site(c);
        // both draws happen for every die so dropout does not shift the stream
        let e = noise[site.0].sample(&mut rng);
        let u: f64 = rng.random();
        if u < cfg.dropout {
            continue;
        }
        let value = cfg.trend.eval(f64::from(c.x) - cx, f64::from(c.y) - cy) + cfg.site_level(site.0, lot) + e;
        set.push(Measurement { coord: c, site, value, lot, wafer })?;
    }
    Ok(set)
}

/// Wafer 1 of lots `1..=lots`.
pub fn generate_lot_series(cfg: &SynthConfig, lots: u32) -> Result<Vec<MeasurementSet>> {
    if lots == 0 {
        return Err(Error::InvalidConfig("at least one lot".into()));
    }
    (1..=lots).map(|lot| generate_wafer(cfg, lot, 1)).collect()
}
