use advpatch_core::Error as CoreError;
use thiserror::Error;

/// CLI failures, grouped by the exit code they map to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error("detector: {0}")]
    Detector(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Data(_) => 4,
            CliError::Detector(_) => 5,
            CliError::Numerical(_) => 6,
            CliError::Checkpoint(_) => 7,
            CliError::Io(_) => 8,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::Shape { .. } | CoreError::InvalidArgument(_) => CliError::Config(msg),
            CoreError::EmptyBatch => CliError::Data(msg),
            CoreError::NonFinite { .. } => CliError::Numerical(msg),
            CoreError::Weights { .. } | CoreError::Network(_) | CoreError::DetectorMismatch { .. } => {
                CliError::Detector(msg)
            }
            CoreError::CheckpointVersion { .. } | CoreError::CheckpointCorrupt { .. } => CliError::Checkpoint(msg),
            CoreError::Image(_) => CliError::Data(msg),
            CoreError::Io(_) => CliError::Io(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_distinct_and_nonzero() {
        let all = [
            CliError::Other(String::new()),
            CliError::Usage(String::new()),
            CliError::Config(String::new()),
            CliError::Data(String::new()),
            CliError::Detector(String::new()),
            CliError::Numerical(String::new()),
            CliError::Checkpoint(String::new()),
            CliError::Io(String::new()),
        ];
        let mut codes: Vec<i32> = all.iter().map(CliError::exit_code).collect();
        codes.sort();
        codes.dedup();
        assert_eq!(codes.len(), all.len());
        assert!(!codes.contains(&0));
    }

    #[test]
    fn core_errors_map_to_categories() {
        let e: CliError = CoreError::NonFinite {
            term: "l_tv",
            epoch: 1,
            step: 2,
        }
        .into();
        assert_eq!(e.exit_code(), 6);
        assert!(e.to_string().contains("l_tv"));
        let e: CliError = CoreError::CheckpointVersion {
            found: "9".into(),
            expected: "1".into(),
        }
        .into();
        assert_eq!(e.exit_code(), 7);
    }
}
