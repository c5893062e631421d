use alloc::string::String;

/// Errors produced by the modeling pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("degenerate layout: {0}")]
    DegenerateLayout(&'static str),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(&'static str),
    #[error("outside tiling: ({x}, {y})")]
    OutsideTiling { x: i32, y: i32 },
    #[error("invalid measurement set: {0}")]
    InvalidMeasurements(String),
    #[error("invalid kernel parameters: {0}")]
    InvalidParams(&'static str),
    #[error("ill-conditioned Gram")]
    IllConditioned,
    #[error("too few points: need at least {need}, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("undertrained site {0}")]
    UndertrainedSite(usize),
    #[error("k too large: k = {k} but only {distinct} distinct values")]
    KTooLarge { k: usize, distinct: usize },
    #[error("invalid cluster count range [{min}, {max}]")]
    InvalidKRange { min: usize, max: usize },
    #[error("CH undefined: {0}")]
    ChUndefined(&'static str),
    #[error("silhouette undefined: {0}")]
    SilhouetteUndefined(&'static str),
    #[error("calibration requires full measurement ({missing} dies missing)")]
    IncompleteCalibration { missing: usize },
    #[error("degenerate calibration: {0}")]
    DegenerateCalibration(&'static str),
    #[error("coordinate not calibrated: ({x}, {y})")]
    NotCalibrated { x: i32, y: i32 },
    #[error("anchor ({x}, {y}) is not a remaining candidate")]
    AnchorUnavailable { x: i32, y: i32 },
    #[error("campaign complete")]
    CampaignComplete,
    #[error("degenerate spec range: {0}")]
    DegenerateSpecRange(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = core::result::Result<T, Error>;
