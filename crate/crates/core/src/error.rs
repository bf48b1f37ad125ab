use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScdError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Param(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("empty reduction: {0}")]
    EmptyReduction(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ScdError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> u8 {
        match self {
            ScdError::Param(_) => 1,
            ScdError::Numerical(_) => 3,
            _ => 2,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        ScdError::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, ScdError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(ScdError::Param("x".into()).exit_code(), 1);
        assert_eq!(ScdError::Format("x".into()).exit_code(), 2);
        assert_eq!(ScdError::io("f", std::io::Error::other("gone")).exit_code(), 2);
        assert_eq!(ScdError::Numerical("x".into()).exit_code(), 3);
    }
}
