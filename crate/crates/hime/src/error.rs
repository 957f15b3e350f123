use std::path::{Path, PathBuf};

use thiserror::Error;

/// Container decoding and schema failures.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic {0:?}, expected \"HIME\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),
    #[error(
        "truncated while reading {what} at offset {offset}: need {needed} bytes, {available} left"
    )]
    Truncated {
        what: String,
        offset: u64,
        needed: u64,
        available: u64,
    },
    #[error("duplicate entry name {0:?}")]
    DuplicateName(String),
    #[error("dims of {0:?} overflow a 64-bit byte count")]
    DimOverflow(String),
    #[error("entry {name:?}: payload is {found} bytes, dims require {expected}")]
    LengthMismatch {
        name: String,
        expected: u64,
        found: u64,
    },
    #[error("entry {0} has a name that is not UTF-8")]
    InvalidName(u32),
    #[error("entry {name:?}: unknown dtype code {code}")]
    UnknownDtype { name: String, code: u8 },
    #[error("entry {name:?}: {ndims} dims exceeds the limit")]
    TooManyDims { name: String, ndims: usize },
    #[error("too many entries for a u32 count")]
    TooManyEntries,
    #[error("{0} trailing bytes after the last entry")]
    TrailingBytes(u64),
    #[error("schema: {0}")]
    Schema(String),
}

pub fn schema(msg: impl Into<String>) -> FormatError {
    FormatError::Schema(msg.into())
}

/// Every error the binary reports. Each variant maps to its own exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("format: {path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("{module}: {}{source}", context_prefix(context))]
    Numeric {
        module: &'static str,
        context: Option<String>,
        #[source]
        source: hime_core::Error,
    },
    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn format(path: &Path, source: FormatError) -> Self {
        CliError::Format {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Format { .. } => 3,
            CliError::Numeric { .. } => 4,
            CliError::Io { .. } => 5,
        }
    }
}

fn context_prefix(context: &Option<String>) -> String {
    context
        .as_ref()
        .map(|c| format!("{c}: "))
        .unwrap_or_default()
}

/// Tags a core error with the module that raised it.
pub fn in_module<T>(module: &'static str, r: hime_core::Result<T>) -> Result<T, CliError> {
    r.map_err(|source| CliError::Numeric {
        module,
        context: None,
        source,
    })
}

/// Like [`in_module`], naming the offending item (a pair, a path).
pub fn in_module_at<T>(
    module: &'static str,
    context: impl FnOnce() -> String,
    r: hime_core::Result<T>,
) -> Result<T, CliError> {
    r.map_err(|source| CliError::Numeric {
        module,
        context: Some(context()),
        source,
    })
}
