use std::fmt;
use std::path::PathBuf;

/// Pipeline stage an error originated in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Detection,
    Recognition,
    Construction,
    Extraction,
    Grounding,
    Model,
    Parse,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Detection => "detection",
            Stage::Recognition => "recognition",
            Stage::Construction => "construction",
            Stage::Extraction => "extraction",
            Stage::Grounding => "grounding",
            Stage::Model => "model",
            Stage::Parse => "parse",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("usage error: {0}")]
    Usage(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("detection error ({backend_id}): {cause}")]
    Detection { backend_id: String, cause: String },

    #[error("recognition error{}: {cause}", region_id.map(|r| format!(" (region {r})")).unwrap_or_default())]
    Recognition { region_id: Option<u32>, cause: String },

    #[error("layout error: {0}")]
    Layout(String),

    #[error("grounding error: unknown region ids {0:?}")]
    Grounding(Vec<u32>),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("protocol error: {message} (body: {excerpt:?})")]
    Protocol { message: String, excerpt: String },

    #[error("could not parse model output: {raw:?}")]
    Parse { raw: String },

    #[error("stage={stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn at(self, stage: Stage) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    /// True for errors the CLI reports as configuration/validation problems.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Usage(_) | Error::Validation(_) => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
