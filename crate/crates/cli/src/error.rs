//! Exit-code classification: 2 for validation failures (bad flags, bad
//! inputs, malformed series), 3 for numerical failures inside an otherwise
//! valid run.

use relex_core::Error as CoreError;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Numerical(m) => m,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    /// Prefix the offending tensor's name onto the message.
    pub fn for_tensor(self, tensor: &str) -> Self {
        match self {
            CliError::Validation(m) => CliError::Validation(format!("tensor {tensor:?}: {m}")),
            CliError::Numerical(m) => CliError::Numerical(format!("tensor {tensor:?}: {m}")),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NearZeroSingularValue { .. }
            | CoreError::NotSymmetric
            | CoreError::DegenerateAbscissa
            | CoreError::SingularSystem
            | CoreError::DegenerateDirection
            | CoreError::PowerIterationStall { .. }
            | CoreError::ZeroTrajectory(_) => CliError::Numerical(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Validation(format!("i/o failure: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Validation(format!("malformed json: {e}"))
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.message())
    }
}

pub type CliResult<T> = Result<T, CliError>;
