use std::fmt;

use orient_core::Error;

/// Error carrying the process exit code: 2 config or usage, 3 I/O,
/// 4 numerical divergence.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } | Error::Format { .. } | Error::MissingModel(_) => 3,
            Error::Diverged(_) | Error::NonFinite => 4,
            _ => 2,
        };
        Self { code, message: e.to_string() }
    }
}
