//! Library side of the `gyrocal` binary: argument types, report types and
//! the command implementations.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | any other failure (IO, solver did not converge, ...) |
//! | 2 | usage or invalid configuration |
//! | 3 | malformed CSV or JSON input |
//! | 4 | rank-deficient data |
//! | 5 | degenerate placement (with `--strict`, or where the request needs a general one) |

pub mod args;
pub mod commands;
pub mod report;

use std::fmt;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_PARSE: i32 = 3;
pub const EXIT_RANK_DEFICIENT: i32 = 4;
pub const EXIT_DEGENERATE: i32 = 5;

#[derive(Debug)]
pub enum CliError {
    Core(gyrocal::Error),
    Usage(String),
    /// Degenerate placement rejected by `--strict`.
    Degenerate(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use gyrocal::Error as E;
        match self {
            CliError::Core(E::Parse { .. }) => EXIT_PARSE,
            CliError::Core(E::RankDeficient(_)) => EXIT_RANK_DEFICIENT,
            CliError::Core(E::SingularPhi | E::UnobservableScale(_)) => EXIT_DEGENERATE,
            CliError::Core(E::InvalidConfig(_)) | CliError::Usage(_) => EXIT_USAGE,
            CliError::Degenerate(_) => EXIT_DEGENERATE,
            CliError::Core(_) | CliError::Io(_) => EXIT_OTHER,
        }
    }

    /// Stable machine-readable name of the failure.
    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            EXIT_USAGE => "usage",
            EXIT_PARSE => "parse",
            EXIT_RANK_DEFICIENT => "rank_deficient",
            EXIT_DEGENERATE => "degenerate",
            _ => "error",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(m) | CliError::Degenerate(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<gyrocal::Error> for CliError {
    fn from(e: gyrocal::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
