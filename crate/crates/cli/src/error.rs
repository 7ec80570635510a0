use std::fmt;

/// Process exit classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 1,
    Data = 2,
    Runtime = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Usage,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Data,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Runtime,
            message: message.into(),
        }
    }

    pub fn code(&self) -> i32 {
        self.kind as i32
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<lksde::Error> for CliError {
    fn from(e: lksde::Error) -> Self {
        use lksde::Error as E;
        let kind = match &e {
            E::InvalidArgument(_) | E::SteeringOutOfRange(_) => ExitKind::Usage,
            E::Record { .. }
            | E::Parse { .. }
            | E::Checkpoint(_)
            | E::UnknownScenario(_)
            | E::Json(_) => ExitKind::Data,
            E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => ExitKind::Data,
            _ => ExitKind::Runtime,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_errors_map_to_exit_classes() {
        let bad_arg = CliError::from(lksde::Error::InvalidArgument("x".into()));
        assert_eq!(bad_arg.code(), 1);
        let missing = CliError::from(lksde::Error::Io(std::io::Error::from(
            std::io::ErrorKind::NotFound,
        )));
        assert_eq!(missing.code(), 2);
        let unknown = CliError::from(lksde::Error::UnknownScenario("a".into()));
        assert_eq!(unknown.code(), 2);
        let nan = CliError::from(lksde::Error::NonFinite {
            what: "loss",
            epoch: 1,
            batch: 0,
        });
        assert_eq!(nan.code(), 3);
    }
}
