use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] hjpi::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A run finished but one of its checks failed.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// 2 for usage and configuration problems, 1 for everything that happens after.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                hjpi::Error::InvalidConfig(_)
                | hjpi::Error::InvalidProblem(_)
                | hjpi::Error::InvalidGrid(_) => 2,
                _ => 1,
            },
            CliError::Io { .. } | CliError::Failed(_) => 1,
        }
    }
}
