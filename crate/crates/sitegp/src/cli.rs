//! Command-line interface. Every command writes into an output directory and
//! leaves a `manifest.json` with the resolved parameters next to its files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use sitegp_core::active::{run_campaign, CampaignOptions, ScoringMode, Strategy};
use sitegp_core::baselines::{naive_gp, two_step_calibrate, two_step_predict, KCriterion};
use sitegp_core::hier::hgpr;
use sitegp_core::metrics::{d_spec_of, delta_error_values, ErrorReport};
use sitegp_core::synth::{generate_lot_series, SynthConfig};
use sitegp_core::wafer::nested_sample;
use sitegp_core::{DieCoord, GpOptions, MeasurementSet, SiteId, TouchdownLayout, WaferGeometry};

use crate::formats::{self, Evaluation, Manifest};
use crate::timed;

#[derive(Debug, Parser)]
#[command(name = "sitegp", version, about = "Per-site Gaussian process models of wafer test data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic wafers (wafer 1 of lots 1..=N).
    Synth(SynthArgs),
    /// Cluster the values of a complete wafer for the two-step baseline.
    #[command(name = "calibrate-2step")]
    Calibrate2Step(CalibrateArgs),
    /// Fit on a sample of a wafer and predict the remaining dies.
    FitPredict(FitPredictArgs),
    /// Run a touchdown sampling campaign on a complete wafer.
    Sample(SampleArgs),
    /// Score a prediction file against measured values.
    Evaluate(EvaluateArgs),
}

/// Locations of the layout and geometry files. Both default to
/// `layout.json` / `geometry.json` next to the measurement CSV.
#[derive(Debug, Args, Serialize)]
pub struct WaferFiles {
    #[arg(long)]
    pub layout: Option<PathBuf>,
    #[arg(long)]
    pub geometry: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// `default`, `small` or a JSON file.
    #[arg(long, default_value = "default")]
    pub config: String,
    #[arg(long, default_value_t = 6, value_parser = clap::value_parser!(u32).range(1..))]
    pub lots: u32,
    /// Overrides the configuration's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CriterionArg {
    Ch,
    Silhouette,
}

impl From<CriterionArg> for KCriterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Ch => KCriterion::Ch,
            CriterionArg::Silhouette => KCriterion::Silhouette,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    /// Complete wafer CSV.
    #[arg(long)]
    pub wafer: PathBuf,
    #[command(flatten)]
    pub files: WaferFiles,
    #[arg(long, default_value_t = 2)]
    pub g_min: usize,
    #[arg(long, default_value_t = 16)]
    pub g_max: usize,
    #[arg(long, value_enum, default_value_t = CriterionArg::Ch)]
    pub criterion: CriterionArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Naive,
    #[value(name = "2step")]
    #[serde(rename = "2step")]
    TwoStep,
    SiteHier,
}

impl Method {
    fn as_str(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::TwoStep => "2step",
            Method::SiteHier => "site-hier",
        }
    }
}

fn parse_rate(s: &str) -> std::result::Result<f64, String> {
    let r: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if r > 0.0 && r <= 1.0 {
        Ok(r)
    } else {
        Err(format!("sampling rate must lie in (0, 1], got {r}"))
    }
}

#[derive(Debug, Args, Serialize)]
pub struct FitPredictArgs {
    /// Complete wafer CSV; the dies not used for training are predicted and scored.
    #[arg(long)]
    pub truth: PathBuf,
    /// Training CSV. When absent, a seeded sample of `--truth` at `--rate` is used.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[command(flatten)]
    pub files: WaferFiles,
    #[arg(long, value_enum, default_value_t = Method::SiteHier)]
    pub method: Method,
    #[arg(long, default_value = "0.1", value_parser = parse_rate)]
    pub rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, required_if_eq("method", "2step"))]
    pub cluster_map: Option<PathBuf>,
    /// JSON file with GP options: `{"gp": {...}}`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write a heat-map CSV here (measured values on training dies,
    /// predicted means elsewhere).
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
    /// Record wall-clock time in `evaluation.json`.
    #[arg(long)]
    pub timing: bool,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyArg {
    Active,
    Random,
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub truth: PathBuf,
    #[command(flatten)]
    pub files: WaferFiles,
    #[arg(long, value_enum, default_value_t = StrategyArg::Active)]
    pub strategy: StrategyArg,
    /// Maximum number of touchdowns.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub budget: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub stop_var_norm: Option<f64>,
    /// Score candidates by refitting the hyperparameters with pseudo-measurements.
    #[arg(long)]
    pub refit_per_candidate: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// Prediction CSV (`x,y,site,mu,var`).
    #[arg(long)]
    pub pred: PathBuf,
    /// Measured values of the predicted dies.
    #[arg(long)]
    pub truth: PathBuf,
    /// Complete wafer whose range normalizes the errors; defaults to `--truth`.
    #[arg(long)]
    pub d_spec_from: Option<PathBuf>,
    #[command(flatten)]
    pub files: WaferFiles,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    gp: GpOptions,
}

fn load_gp_options(path: Option<&Path>) -> Result<GpOptions> {
    match path {
        None => Ok(GpOptions::default()),
        Some(p) => Ok(formats::read_json::<ConfigFile>(p)?.gp),
    }
}

fn sibling(csv: &Path, name: &str) -> PathBuf {
    csv.parent().map_or_else(|| PathBuf::from(name), |d| d.join(name))
}

fn load_wafer(csv: &Path, files: &WaferFiles) -> Result<MeasurementSet> {
    let (layout, geometry) = load_layout_geometry(csv, files)?;
    formats::read_measurements(csv, layout, geometry)
}

fn load_layout_geometry(csv: &Path, files: &WaferFiles) -> Result<(TouchdownLayout, WaferGeometry)> {
    let lp = files.layout.clone().unwrap_or_else(|| sibling(csv, "layout.json"));
    let gp = files.geometry.clone().unwrap_or_else(|| sibling(csv, "geometry.json"));
    Ok((formats::read_layout(&lp)?, formats::read_geometry(&gp)?))
}

fn prepare_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write_manifest<T: Serialize>(out: &Path, command: &str, params: &T, outputs: &[String]) -> Result<()> {
    let m = Manifest::new(command, serde_json::to_value(params)?, outputs.to_vec());
    formats::write_json(&out.join("manifest.json"), &m)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Calibrate2Step(a) => calibrate(&a),
        Command::FitPredict(a) => fit_predict(&a),
        Command::Sample(a) => sample(&a),
        Command::Evaluate(a) => evaluate(&a),
    }
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = match a.config.as_str() {
        "default" => SynthConfig::default_wafer(),
        "small" => SynthConfig::small(),
        path => formats::read_json::<SynthConfig>(Path::new(path))?,
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    prepare_out(&a.out)?;
    let wafers = generate_lot_series(&cfg, a.lots)?;
    let mut outputs = Vec::new();
    for (i, w) in wafers.iter().enumerate() {
        let name = format!("lot{}_wafer1.csv", i + 1);
        formats::write_measurements(&a.out.join(&name), w)?;
        outputs.push(name);
    }
    formats::write_json(&a.out.join("geometry.json"), &cfg.geometry)?;
    formats::write_json(&a.out.join("layout.json"), &cfg.layout)?;
    outputs.extend(["geometry.json".to_string(), "layout.json".to_string()]);
    #[derive(Serialize)]
    struct Params<'a> {
        config: &'a str,
        lots: u32,
        seed: u64,
    }
    write_manifest(&a.out, "synth", &Params { config: &a.config, lots: a.lots, seed: cfg.seed }, &outputs)
}

fn calibrate(a: &CalibrateArgs) -> Result<()> {
    let wafer = load_wafer(&a.wafer, &a.files)?;
    let map = two_step_calibrate(&wafer, a.g_min, a.g_max, a.criterion.into(), a.seed)?;
    prepare_out(&a.out)?;
    formats::write_atomic(&a.out.join("cluster_map.json"), &formats::cluster_map_to_json(&map)?)?;
    write_manifest(&a.out, "calibrate-2step", a, &["cluster_map.json".to_string()])
}

fn fit_predict(a: &FitPredictArgs) -> Result<()> {
    let opts = load_gp_options(a.config.as_deref())?;
    let truth = load_wafer(&a.truth, &a.files)?;
    if truth.is_empty() {
        bail!("{} holds no measurements", a.truth.display());
    }
    let d_spec = d_spec_of(&truth.values())?;
    let train = match &a.train {
        Some(p) => {
            let t = formats::read_measurements(p, truth.layout().clone(), truth.geometry().clone())?;
            let unknown: Vec<DieCoord> = t.coords().into_iter().filter(|c| !truth.contains(*c)).collect();
            if !unknown.is_empty() {
                bail!("training dies missing from the truth wafer: {}", list_coords(&unknown));
            }
            t
        }
        None => {
            let (idx, _) = nested_sample(truth.len(), a.rate, a.seed)?;
            truth.select(&idx)?
        }
    };
    let train_set: BTreeSet<DieCoord> = train.coords().into_iter().collect();
    let test: Vec<DieCoord> = truth.coords().into_iter().filter(|c| !train_set.contains(c)).collect();
    let tiling = truth.tiling()?;

    let (result, seconds) = timed(|| -> Result<_> {
        Ok(match a.method {
            Method::Naive => (naive_gp(&train, &test, &opts)?.1, Vec::new()),
            Method::SiteHier => {
                let g = hgpr(&train, &test, &opts)?;
                let fb = g.fallback_groups();
                (g.prediction, fb)
            }
            Method::TwoStep => {
                let path = a.cluster_map.as_ref().context("--cluster-map is required for 2step")?;
                let map = formats::read_cluster_map(path)?;
                let g = two_step_predict(&map, &train, &test, &opts)?;
                let fb = g.fallback_groups();
                (g.prediction, fb)
            }
        })
    });
    let (pred, fallback_groups) = result?;

    let y: Vec<f64> = test.iter().map(|c| truth.get(*c).expect("test die from truth").value).collect();
    let report = delta_error_values(&pred.means, &y, d_spec)?;
    let sites: Vec<SiteId> = test.iter().map(|&c| tiling.site_of(c)).collect::<sitegp_core::Result<_>>()?;

    prepare_out(&a.out)?;
    let mut outputs = vec!["predictions.csv".to_string(), "evaluation.json".to_string()];
    formats::write_atomic(&a.out.join("predictions.csv"), &formats::predictions_to_csv(&pred, &sites)?)?;
    let first = truth.records()[0];
    let eval = Evaluation {
        method: Some(a.method.as_str().into()),
        lot: Some(first.lot),
        wafer: Some(first.wafer),
        sampling_rate: a.train.is_none().then_some(a.rate),
        seed: Some(a.seed),
        n_train: Some(train.len()),
        fallback_groups,
        wall_seconds: a.timing.then_some(seconds),
        ..Evaluation::from_report(&report)
    };
    formats::write_json(&a.out.join("evaluation.json"), &eval)?;
    if let Some(path) = &a.heatmap {
        let mut values: BTreeMap<DieCoord, f64> = train.records().iter().map(|r| (r.coord, r.value)).collect();
        values.extend(pred.coords.iter().copied().zip(pred.means.iter().copied()));
        formats::write_atomic(path, &formats::heatmap_to_csv(truth.geometry(), &values)?)?;
        outputs.push(path.display().to_string());
    }
    #[derive(Serialize)]
    struct Params<'a> {
        #[serde(flatten)]
        args: &'a FitPredictArgs,
        gp: &'a GpOptions,
    }
    write_manifest(&a.out, "fit-predict", &Params { args: a, gp: &opts }, &outputs)
}

fn sample(a: &SampleArgs) -> Result<()> {
    let gp = load_gp_options(a.config.as_deref())?;
    let truth = load_wafer(&a.truth, &a.files)?;
    if let Some(t) = a.stop_var_norm {
        if !(t >= 0.0) {
            bail!("--stop-var-norm must be nonnegative");
        }
    }
    let opts = CampaignOptions {
        gp,
        scoring: if a.refit_per_candidate { ScoringMode::Refit } else { ScoringMode::Frozen },
        stop_var_norm: a.stop_var_norm,
    };
    let strategy = match a.strategy {
        StrategyArg::Active => Strategy::Active,
        StrategyArg::Random => Strategy::Random,
    };
    let budget = usize::try_from(a.budget).unwrap_or(usize::MAX);
    let log = run_campaign(&truth, strategy, budget, a.seed, &opts)?;
    if log.truncated {
        eprintln!("note: budget {} exceeds the {} touchdowns on the wafer", a.budget, log.rows.len());
    }
    prepare_out(&a.out)?;
    formats::write_atomic(&a.out.join("campaign.csv"), &formats::campaign_to_csv(&log)?)?;
    #[derive(Serialize)]
    struct Params<'a> {
        #[serde(flatten)]
        args: &'a SampleArgs,
        gp: &'a GpOptions,
    }
    write_manifest(&a.out, "sample", &Params { args: a, gp: &opts.gp }, &["campaign.csv".to_string()])
}

fn list_coords(cs: &[DieCoord]) -> String {
    const SHOW: usize = 20;
    let mut s: Vec<String> = cs.iter().take(SHOW).map(|c| format!("({}, {})", c.x, c.y)).collect();
    if cs.len() > SHOW {
        s.push(format!("... {} more", cs.len() - SHOW));
    }
    s.join(", ")
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let rows = formats::read_predictions(&a.pred)?;
    let truth = load_wafer(&a.truth, &a.files)?;
    let d_spec = match &a.d_spec_from {
        Some(p) => {
            let (layout, geometry) = load_layout_geometry(p, &a.files)?;
            d_spec_of(&formats::read_measurements(p, layout, geometry)?.values())?
        }
        None => d_spec_of(&truth.values())?,
    };
    let mut seen = BTreeSet::new();
    let mut missing = Vec::new();
    let (mut means, mut y) = (Vec::with_capacity(rows.len()), Vec::with_capacity(rows.len()));
    for r in &rows {
        let c = DieCoord::new(r.x, r.y);
        if !seen.insert(c) {
            bail!("{}: duplicate prediction for ({}, {})", a.pred.display(), r.x, r.y);
        }
        match truth.get(c) {
            Some(m) => {
                means.push(r.mu);
                y.push(m.value);
            }
            None => missing.push(c),
        }
    }
    if !missing.is_empty() {
        bail!("{} predicted dies have no measured value: {}", missing.len(), list_coords(&missing));
    }
    let report: ErrorReport = delta_error_values(&means, &y, d_spec)?;
    prepare_out(&a.out)?;
    formats::write_json(&a.out.join("evaluation.json"), &Evaluation::from_report(&report))?;
    write_manifest(&a.out, "evaluate", a, &["evaluation.json".to_string()])
}
