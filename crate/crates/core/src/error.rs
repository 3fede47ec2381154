use thiserror::Error;

use crate::datamodel::SubgroupKey;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("record {index}: feature value {value} is not finite")]
    NonFiniteFeature { index: usize, value: f64 },

    #[error("record {index}: attributes must be 0 or 1 (u = {u}, s = {s})")]
    InvalidAttribute { index: usize, u: u8, s: u8 },

    #[error("attribute weights are undefined for an empty dataset")]
    UndefinedWeights,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("learner is already quenched")]
    Quenched,

    #[error("learner has not stopped yet (k = {absorbed}, smoothed KLD = {smoothed_kld})")]
    NotStopped { absorbed: usize, smoothed_kld: f64 },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("quantized conditional needs at least two distinct vertices, found {distinct}")]
    InsufficientSupport { distinct: usize },

    #[error("no repair fitted for group u = {u}")]
    UnfittedGroup { u: u8 },

    #[error("subgroup {0} is empty")]
    EmptySubgroup(SubgroupKey),

    #[error("density estimation failed: {0}")]
    Estimation(String),

    #[error("histograms do not share bin edges")]
    IncompatibleDensities,

    #[error("Ê is undefined: the unrepaired data already have zero unfairness")]
    UndefinedRatio,

    #[error("datasets are not aligned: {0}")]
    Misaligned(String),

    #[error("off-sample repair is not supported by the geometric baseline (x = {x} not in fitted subgroup {key})")]
    OffSampleUnsupported { x: f64, key: SubgroupKey },

    #[error("sampling did not converge after {draws} draws; smoothed KLD per subgroup: {smoothed:?}")]
    NonConvergence { draws: u64, smoothed: [f64; 4] },

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("unsupported snapshot: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
