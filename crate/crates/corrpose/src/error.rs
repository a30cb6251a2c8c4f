use thiserror::Error;

/// Errors shared across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point cloud is degenerate (rank < 2): {0}")]
    DegenerateCloud(String),
    #[error("all camera optical axes are parallel; cannot intersect viewing rays")]
    ParallelAxes,
    #[error("no cloud point projects in front of the camera")]
    NoVisiblePoints,
    #[error("no pixel was covered by any render")]
    EmptyCloud,
    #[error("rendered mask is empty")]
    EmptyMask,
    #[error("no pixel passes the mask-probability floor")]
    NoMaskedPixels,
    #[error("point outside the normalization box: {0:?}")]
    OutOfBox([f64; 3]),
    #[error("input resolution {got_w}x{got_h} does not match expected {want_w}x{want_h}")]
    ResolutionMismatch {
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: usize },
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewCorrespondences { needed: usize, got: usize },
    #[error("every minimal sample was degenerate; no pose hypothesis found")]
    NoHypothesis,
    #[error("fewer than {needed} valid overlapping depth pixels ({got})")]
    InsufficientDepth { needed: usize, got: usize },
    #[error("occluder placement failed after {0} retries")]
    PlacementFailure(usize),
    #[error("bounding box does not intersect the image")]
    BoxOutsideImage,
    #[error("invalid {what}: {why}")]
    Invalid { what: &'static str, why: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("pipeline stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error("parse error in {what}: {why}")]
    Parse { what: String, why: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(String),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(what: &'static str, why: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            why: why.into(),
        }
    }
}
