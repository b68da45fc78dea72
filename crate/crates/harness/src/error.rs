use std::path::Path;
use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] rcd_core::Error),

    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("results file: {0}")]
    Csv(#[from] csv::Error),

    #[error("{0}")]
    Schema(String),

    #[error("{0}")]
    CheckFailed(String),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Stable tag printed in the one-line error report.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Core(e) => e.kind(),
            HarnessError::Config(_) => "config",
            HarnessError::Usage(_) => "usage",
            HarnessError::Io { .. } => "io",
            HarnessError::Csv(_) => "csv",
            HarnessError::Schema(_) => "schema",
            HarnessError::CheckFailed(_) => "check_failed",
        }
    }

    /// `error: kind=<kind> msg=<json string>`, on one line.
    pub fn report(&self) -> String {
        let msg = serde_json::to_string(&self.to_string()).expect("strings serialize");
        format!("error: kind={} msg={}", self.kind(), msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_is_one_line() {
        let e = HarnessError::Config("bad\nvalue".into());
        let r = e.report();
        assert!(!r.contains('\n'));
        assert_eq!(r, r#"error: kind=config msg="bad\nvalue""#);
        let core: HarnessError = rcd_core::Error::Config("x".into()).into();
        assert_eq!(core.kind(), "config");
    }
}
