use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] uranker::Error),

    #[error("http error: {0}")]
    Http(#[from] reqwest::Error),

    #[error("server responded {status}: {body}")]
    Server { status: u16, body: String },

    #[error("{0}")]
    Oracle(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<candle_core::Error> for CliError {
    fn from(e: candle_core::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<uranker::annotation::SessionError> for CliError {
    fn from(e: uranker::annotation::SessionError) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Http(_) => "http",
            CliError::Server { .. } => "server",
            CliError::Oracle(_) => "oracle_mismatch",
            CliError::Io(_) => "io",
            CliError::Json(_) => "json",
        }
    }

    /// The single stderr line printed before a non-zero exit.
    pub fn to_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}
