use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input too short: {len} samples, need at least {needed}")]
    InputTooShort { len: usize, needed: usize },
    #[error("non-finite input ({0})")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("more bands than bins ({bands} bands, {bins} bins)")]
    MoreBandsThanBins { bands: usize, bins: usize },
    #[error("no overlap stats for partition")]
    NoOverlapStats,
    #[error("bin without band: {0}")]
    BinWithoutBand(usize),
    #[error("undefined SDR: reference is all-zero")]
    UndefinedSdr,
    #[error("all chunks silent")]
    AllChunksSilent,
    #[error("empty input: {0}")]
    Empty(String),
    #[error("coverage gap at sample {0}")]
    CoverageGap(usize),
    #[error("numerical blow-up in {0}")]
    NumericalBlowUp(String),
    #[error("diverged: {0}")]
    Diverged(String),
    #[error("missing mixture.wav in {0}")]
    MissingMixture(PathBuf),
    #[error("unsupported audio: {0}")]
    UnsupportedAudio(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numerical failures (as opposed to bad input or configuration).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NumericalBlowUp(_) | Error::Diverged(_))
    }
}
