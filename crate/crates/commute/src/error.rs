use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("coordinate out of range or non-finite: lat={lat}, lon={lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },

    #[error("polygon ring has {vertices} vertices, need at least 3")]
    DegenerateRing { vertices: usize },

    #[error("polygon ring is self-intersecting")]
    SelfIntersectingRing,

    #[error("degenerate geometry: no grid sample fell inside the subject polygon")]
    DegenerateGeometry,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown timezone: {0}")]
    UnknownTimezone(String),

    #[error("missing required column: {0}")]
    MissingColumn(String),

    #[error("invalid geometry for tract {tract_id}: {reason}")]
    InvalidTract { tract_id: String, reason: String },

    #[error("point ({lat}, {lon}) contained in multiple tracts: {a} and {b}")]
    OverlappingTracts { lat: f64, lon: f64, a: String, b: String },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("empty pair set for the selected pair-selection mode")]
    EmptyPairSet,

    #[error("observation window contains no weekdays")]
    NoWeekdays,

    #[error("infeasible synthetic geometry: {0}")]
    InfeasibleGeometry(String),

    #[error("ground-truth / pipeline id mismatch: {0}")]
    IdMismatch(String),

    #[error("stage input missing: {0}")]
    StageInput(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
