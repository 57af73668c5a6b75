use std::fmt;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const RUN_FAILED: i32 = 2;
    pub const VERIFY_FAILED: i32 = 3;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error at {}: {message}", Pointer(pointer))]
    Config { pointer: String, message: String },
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("run failed: {0}")]
    Run(String),
    #[error("{0}")]
    Verify(String),
    #[error("missing data: {0}")]
    Missing(String),
}

struct Pointer<'a>(&'a str);

impl fmt::Display for Pointer<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            f.write_str("<root>")
        } else {
            f.write_str(self.0)
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } | CliError::Io(..) | CliError::Missing(_) => exit::USAGE,
            CliError::Run(_) => exit::RUN_FAILED,
            CliError::Verify(_) => exit::VERIFY_FAILED,
        }
    }

    pub fn run(e: impl fmt::Display) -> Self {
        CliError::Run(e.to_string())
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Io(path.display().to_string(), e)
    }
}
