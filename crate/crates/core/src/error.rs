use thiserror::Error;

/// Errors produced by the localization engine.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("estimation failed: {0}")]
    EstimationFailed(String),

    /// No candidate intersections exist (e.g. all beam pairs near-parallel).
    #[error("no candidate intersections")]
    NoCandidates,

    /// No lobe assignment satisfies the error range on all nodes.
    #[error("grating ambiguity unresolved")]
    AmbiguityUnresolved,

    /// Two lobe pairs explain a mutual observation equally well; the caller
    /// should retry with more packets.
    #[error("ambiguous mutual direction: best residual {best:.4} rad, runner-up {runner_up:.4} rad")]
    AmbiguousDirection { best: f64, runner_up: f64 },

    /// The scale search ended on the interval boundary, which signals
    /// inconsistent RSSI data.
    #[error("network scale unbounded: search stopped at d12 = {at_d12} m")]
    ScaleUnbounded { at_d12: f64 },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
