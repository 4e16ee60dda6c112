//! Command failures and their process exit codes.

use std::fmt;

use qdnn::Error;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;
const EXIT_OTHER: u8 = 1;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure { code: EXIT_USAGE, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Failure { code: EXIT_DATA, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Library errors keep their message; the exit code follows the kind.
impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Contract(_) | Error::BitWidth(_) | Error::UnknownMode(_) | Error::UnsupportedFamily(_) => EXIT_USAGE,
            Error::Parse { .. } | Error::Format(_) | Error::Csv(_) | Error::Io(_) => EXIT_DATA,
            Error::NonFinite { .. } => EXIT_DIVERGED,
            Error::Shape { .. } | Error::Domain(_) | Error::MissingStats(_) => EXIT_OTHER,
        };
        Failure { code, message: e.to_string() }
    }
}
