use std::fmt;

use medkan_core::Error;

/// Process exit classes. The numeric values are part of the interface.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitClass {
    Ok = 0,
    CheckFailed = 1,
    Config = 2,
    Data = 3,
    Runtime = 4,
}

impl ExitClass {
    pub fn code(self) -> i32 {
        self as i32
    }

    pub fn label(self) -> &'static str {
        match self {
            ExitClass::Ok => "ok",
            ExitClass::CheckFailed => "check_failed",
            ExitClass::Config => "config",
            ExitClass::Data => "data",
            ExitClass::Runtime => "runtime",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub class: ExitClass,
    pub message: String,
}

impl CliError {
    pub fn new(class: ExitClass, message: impl Into<String>) -> Self {
        Self {
            class,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ExitClass::Config, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(ExitClass::Data, message)
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self::new(ExitClass::Runtime, message)
    }

    /// The single machine-readable stderr line.
    pub fn line(&self) -> String {
        let msg = self.message.replace('\n', " ").replace('"', "'");
        format!("error_code={} kind={} message=\"{msg}\"", self.class.code(), self.class.label())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let class = match &e {
            Error::Config(_) | Error::Json(_) | Error::ShapeMismatch { .. } | Error::DtypeMismatch { .. } => {
                ExitClass::Config
            }
            Error::Data(_) | Error::CorruptCheckpoint(_) | Error::CheckpointVersion(_) => ExitClass::Data,
            _ => ExitClass::Runtime,
        };
        Self::new(class, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
