use std::path::{Path, PathBuf};

use bandres::error::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    /// A parse or coverage problem in an input file.
    #[error("{path}:{line}: {message}")]
    Input { path: PathBuf, line: usize, message: String },

    #[error("{path}: {message}")]
    Coverage { path: PathBuf, message: String },

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    /// Attach a file name to errors raised while reading that file.
    pub fn in_file(path: &Path, err: CoreError) -> Self {
        match err {
            CoreError::Parse { line, message } => CliError::Input { path: path.to_path_buf(), line, message },
            CoreError::Coverage(message) => CliError::Coverage { path: path.to_path_buf(), message },
            CoreError::Serde(message) => CliError::Input { path: path.to_path_buf(), line: 0, message },
            other => CliError::Core(other),
        }
    }

    /// 0 ok, 1 other, 2 config/usage, 3 input, 4 search too large,
    /// 5 training/numeric, 6 io.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Input { .. } | CliError::Coverage { .. } | CliError::MissingArtifact(_) => 3,
            CliError::Io { .. } => 6,
            CliError::Core(e) => match e {
                CoreError::Config(_) => 2,
                CoreError::Parse { .. } | CoreError::Coverage(_) | CoreError::Serde(_) => 3,
                CoreError::SearchTooLarge(_) => 4,
                CoreError::Training(_) | CoreError::Numeric(_) | CoreError::NotReady { .. } => 5,
                _ => 1,
            },
        }
    }
}
