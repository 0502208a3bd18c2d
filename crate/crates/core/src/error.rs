use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid probe geometry: {0}")]
    InvalidProbe(String),

    #[error("invalid acquisition: {0}")]
    InvalidAcquisition(String),

    #[error("invalid image grid: {0}")]
    InvalidGrid(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid observation matrix: {0}")]
    InvalidObservations(String),

    /// Sample covariance too ill-conditioned to whiten without dropping directions.
    #[error(
        "rank-deficient covariance: eigenvalue #{index} = {eigenvalue:e} gives condition number {condition:e} (limit {limit:e})"
    )]
    RankDeficient {
        index: usize,
        eigenvalue: f64,
        condition: f64,
        limit: f64,
    },

    #[error("FastICA did not converge within {iterations} iterations (last |<w_new, w>| = {last_dot})")]
    NotConverged { iterations: usize, last_dot: f64 },

    #[error(
        "central crop is empty: aperture of {aperture_elements} elements at depth {max_depth_m} m is wider than the {n_elements}-element array; use a larger F-number or a shallower crop depth"
    )]
    EmptyCrop {
        aperture_elements: usize,
        n_elements: usize,
        max_depth_m: f64,
    },

    #[error("apodization profile does not fit the aperture: {0}")]
    ProfileMismatch(String),

    #[error("image grids differ: {0}")]
    GridMismatch(String),

    #[error("no peak found in the search neighborhood")]
    NoPeak,

    #[error("half maximum is not crossed inside the neighborhood on the {0} side")]
    HalfMaxNotCrossed(&'static str),

    #[error("CNR is not finite: equal region means or zero spread")]
    UndefinedCnr,

    #[error("region mask {0} is empty")]
    EmptyMask(&'static str),

    #[error("envelope is identically zero")]
    ZeroEnvelope,

    #[error("channel {0} has zero signal power; SNR is undefined")]
    ZeroPowerChannel(usize),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Png(#[from] png::EncodingError),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
