use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("topology mismatch between teacher and student: {}", .0.join(", "))]
    Topology(Vec<String>),

    #[error("teacher checkpoint not found: {}", .0.display())]
    MissingTeacher(PathBuf),

    #[error("refusing to overwrite {} (config hash {existing} != {requested}); pass --force", .path.display())]
    Provenance {
        path: PathBuf,
        existing: String,
        requested: String,
    },

    #[error("teacher checkpoint {} was trained from a different spec (hash {existing} != {requested}); retrain it with train-teacher --force", .path.display())]
    StaleTeacher {
        path: PathBuf,
        existing: String,
        requested: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    ConfigParse(#[from] toml::de::Error),

    #[error("config write error: {0}")]
    ConfigWrite(#[from] toml::ser::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
