//! On-disk formats: measurement, prediction, campaign and heat-map CSV files,
//! layout / geometry / cluster-map / evaluation JSON, and the run manifest.
//!
//! Every file is written atomically (temporary file in the target directory,
//! then rename).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use sitegp_core::active::CampaignLog;
use sitegp_core::baselines::ClusterMap;
use sitegp_core::metrics::{ErrorReport, Quantiles};
use sitegp_core::{DieCoord, Measurement, MeasurementSet, PredictionResult, SiteId, TouchdownLayout, WaferGeometry};

pub const MEASUREMENT_HEADER: [&str; 6] = ["lot", "wafer", "x", "y", "site", "value"];
pub const PREDICTION_HEADER: [&str; 5] = ["x", "y", "site", "mu", "var"];
pub const CAMPAIGN_HEADER: [&str; 8] =
    ["step", "anchor_x", "anchor_y", "mean_abs_delta", "max_abs_delta", "var_norm", "strategy", "seed"];

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating temporary file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s.into_bytes())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json_bytes(value)?)
}

pub fn read_geometry(path: &Path) -> Result<WaferGeometry> {
    let g: WaferGeometry = read_json(path)?;
    g.validate().with_context(|| format!("in {}", path.display()))?;
    Ok(g)
}

pub fn read_layout(path: &Path) -> Result<TouchdownLayout> {
    read_json(path)
}

fn check_header(rdr: &mut csv::Reader<impl std::io::Read>, expected: &[&str], what: &str) -> Result<()> {
    let got: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if got != expected {
        bail!("{what}: expected header `{}`, found `{}`", expected.join(","), got.join(","));
    }
    Ok(())
}

// Header written explicitly so that empty tables still carry it.
fn headed_writer(header: &[&str]) -> Result<csv::Writer<Vec<u8>>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    Ok(w)
}

#[derive(Debug, Serialize, Deserialize)]
struct MeasurementRow {
    lot: u32,
    wafer: u32,
    x: i32,
    y: i32,
    site: usize,
    value: f64,
}

pub fn measurements_to_csv(set: &MeasurementSet) -> Result<Vec<u8>> {
    let mut w = headed_writer(&MEASUREMENT_HEADER)?;
    for r in set.records() {
        w.serialize(MeasurementRow { lot: r.lot, wafer: r.wafer, x: r.coord.x, y: r.coord.y, site: r.site.0, value: r.value })?;
    }
    Ok(w.into_inner()?)
}

pub fn measurements_from_reader(rdr: impl std::io::Read, layout: TouchdownLayout, geometry: WaferGeometry) -> Result<MeasurementSet> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(rdr);
    check_header(&mut rdr, &MEASUREMENT_HEADER, "measurement CSV")?;
    let mut records = Vec::new();
    for (i, row) in rdr.deserialize::<MeasurementRow>().enumerate() {
        let row = row.with_context(|| format!("measurement CSV row {}", i + 2))?;
        records.push(Measurement {
            coord: DieCoord::new(row.x, row.y),
            site: SiteId(row.site),
            value: row.value,
            lot: row.lot,
            wafer: row.wafer,
        });
    }
    Ok(MeasurementSet::new(records, layout, geometry)?)
}

pub fn read_measurements(path: &Path, layout: TouchdownLayout, geometry: WaferGeometry) -> Result<MeasurementSet> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    measurements_from_reader(f, layout, geometry).with_context(|| format!("reading {}", path.display()))
}

pub fn write_measurements(path: &Path, set: &MeasurementSet) -> Result<()> {
    write_atomic(path, &measurements_to_csv(set)?)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictionRow {
    pub x: i32,
    pub y: i32,
    pub site: usize,
    pub mu: f64,
    pub var: f64,
}

pub fn predictions_to_csv(pred: &PredictionResult, sites: &[SiteId]) -> Result<Vec<u8>> {
    let mut w = headed_writer(&PREDICTION_HEADER)?;
    for i in 0..pred.len() {
        let c = pred.coords[i];
        w.serialize(PredictionRow { x: c.x, y: c.y, site: sites[i].0, mu: pred.means[i], var: pred.variances[i] })?;
    }
    Ok(w.into_inner()?)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(f);
    check_header(&mut rdr, &PREDICTION_HEADER, "prediction CSV")?;
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| r.with_context(|| format!("{} row {}", path.display(), i + 2)))
        .collect()
}

#[derive(Debug, Serialize)]
struct CampaignCsvRow<'a> {
    step: usize,
    anchor_x: i32,
    anchor_y: i32,
    mean_abs_delta: f64,
    max_abs_delta: f64,
    var_norm: f64,
    strategy: &'a str,
    seed: u64,
}

pub fn campaign_to_csv(log: &CampaignLog) -> Result<Vec<u8>> {
    let mut w = headed_writer(&CAMPAIGN_HEADER)?;
    for r in &log.rows {
        w.serialize(CampaignCsvRow {
            step: r.step,
            anchor_x: r.anchor.x,
            anchor_y: r.anchor.y,
            mean_abs_delta: r.mean_abs_delta,
            max_abs_delta: r.max_abs_delta,
            var_norm: r.var_norm,
            strategy: log.strategy.as_str(),
            seed: log.seed,
        })?;
    }
    Ok(w.into_inner()?)
}

#[derive(Debug, Serialize, Deserialize)]
struct Source {
    lot: u32,
    wafer: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct AssignmentRow {
    x: i32,
    y: i32,
    label: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClusterMapFile {
    k: usize,
    source: Source,
    assignment: Vec<AssignmentRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    centroids: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    geometry: Option<WaferGeometry>,
}

pub fn cluster_map_to_json(map: &ClusterMap) -> Result<Vec<u8>> {
    let file = ClusterMapFile {
        k: map.k,
        source: Source { lot: map.source.0, wafer: map.source.1 },
        assignment: map.assignment.iter().map(|(c, &label)| AssignmentRow { x: c.x, y: c.y, label }).collect(),
        centroids: map.centroids.clone(),
        geometry: map.geometry.clone(),
    };
    to_json_bytes(&file)
}

pub fn read_cluster_map(path: &Path) -> Result<ClusterMap> {
    let f: ClusterMapFile = read_json(path)?;
    let mut assignment = BTreeMap::new();
    for a in &f.assignment {
        if assignment.insert(DieCoord::new(a.x, a.y), a.label).is_some() {
            bail!("{}: coordinate ({}, {}) assigned twice", path.display(), a.x, a.y);
        }
    }
    let map = ClusterMap { k: f.k, source: (f.source.lot, f.source.wafer), assignment, centroids: f.centroids, geometry: f.geometry };
    map.validate().with_context(|| format!("in {}", path.display()))?;
    Ok(map)
}

/// Evaluation summary written by `fit-predict` and `evaluate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub method: Option<String>,
    pub lot: Option<u32>,
    pub wafer: Option<u32>,
    pub sampling_rate: Option<f64>,
    pub seed: Option<u64>,
    pub n_train: Option<usize>,
    pub n_test: usize,
    pub d_spec: f64,
    pub mean_abs_delta: f64,
    pub max_abs_delta: f64,
    pub mean_delta: f64,
    pub quantiles: Quantiles,
    /// Groups predicted by the fallback instead of their own GP.
    pub fallback_groups: Vec<usize>,
    pub wall_seconds: Option<f64>,
}

impl Evaluation {
    pub fn from_report(report: &ErrorReport) -> Self {
        Self {
            method: None,
            lot: None,
            wafer: None,
            sampling_rate: None,
            seed: None,
            n_train: None,
            n_test: report.deltas.len(),
            d_spec: report.d_spec,
            mean_abs_delta: report.mean_abs,
            max_abs_delta: report.max_abs,
            mean_delta: report.mean,
            quantiles: report.quantiles,
            fallback_groups: Vec::new(),
            wall_seconds: None,
        }
    }
}

/// Dense y-by-x matrix over the geometry's bounding box. The first row holds
/// the x values, the first column the y values; absent dies are blank.
pub fn heatmap_to_csv(geometry: &WaferGeometry, values: &BTreeMap<DieCoord, f64>) -> Result<Vec<u8>> {
    let (x0, y0, x1, y1) = geometry.bounds();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["y\\x".to_string()];
    header.extend((x0..=x1).map(|x| x.to_string()));
    w.write_record(&header)?;
    for y in y0..=y1 {
        let mut row = vec![y.to_string()];
        row.extend((x0..=x1).map(|x| values.get(&DieCoord::new(x, y)).map_or(String::new(), |v| v.to_string())));
        w.write_record(&row)?;
    }
    Ok(w.into_inner()?)
}

/// Resolved parameters of one run, written as `manifest.json`.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub parameters: serde_json::Value,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, parameters: serde_json::Value, outputs: Vec<String>) -> Self {
        Self { tool: "sitegp", version: env!("CARGO_PKG_VERSION"), command: command.into(), parameters, outputs }
    }
}
