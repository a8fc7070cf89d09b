use std::process::ExitCode;

/// Bad flags, a malformed plan or an invalid config. Exits with status 2;
/// every other failure exits with 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

/// Wraps any error as a usage error, keeping its message chain.
pub fn as_usage(err: impl Into<anyhow::Error>) -> anyhow::Error {
    usage(format!("{:#}", err.into()))
}

pub fn exit_code(err: &anyhow::Error) -> ExitCode {
    if err.downcast_ref::<UsageError>().is_some() {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}
