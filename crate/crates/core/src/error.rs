//! Error type shared by every module, plus the closed API error-code set.

use std::collections::BTreeMap;

use serde_json::{json, Value};
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{kind} not found: {id}")]
    NotFound { kind: &'static str, id: String },

    #[error("{0}")]
    Validation(String),

    #[error("{message}")]
    Schema {
        message: String,
        row: Option<usize>,
        columns: Vec<String>,
    },

    #[error("{0}")]
    State(String),

    #[error("illegal status transition from {current} to {requested}")]
    Transition { current: String, requested: String },

    #[error("{kind} already exists: {id}")]
    AlreadyExists { kind: &'static str, id: String },

    #[error("edge would create a {kind} cycle: {}", path.join(" -> "))]
    Cycle { kind: String, path: Vec<String> },

    #[error("{message}")]
    Corruption {
        message: String,
        path: Option<String>,
    },

    #[error("bundle is incomplete: {path} is listed in the manifest but missing")]
    IncompleteBundle { path: String },

    #[error("out-of-order feedback: expected seq {expected}, got {got}")]
    Ordering { expected: u64, got: u64 },

    #[error("{0}")]
    Unsupported(String),

    #[error("{0}")]
    Inconclusive(String),

    #[error("normal equations are singular: {0}")]
    Singular(String),

    #[error("store error: {0}")]
    Store(String),

    /// An error reported by a remote service, carried back to the caller.
    #[error("{message}")]
    Api {
        code: ErrorCode,
        message: String,
        detail: BTreeMap<String, Value>,
    },

    #[error("cannot reach service: {0}")]
    Unreachable(String),
}

impl Error {
    pub fn not_found(kind: &'static str, id: impl Into<String>) -> Self {
        Error::NotFound {
            kind,
            id: id.into(),
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn schema(msg: impl Into<String>) -> Self {
        Error::Schema {
            message: msg.into(),
            row: None,
            columns: Vec::new(),
        }
    }

    pub fn missing_columns(columns: Vec<String>) -> Self {
        Error::Schema {
            message: format!("missing columns: {}", columns.join(", ")),
            row: None,
            columns,
        }
    }

    pub fn corruption(msg: impl Into<String>) -> Self {
        Error::Corruption {
            message: msg.into(),
            path: None,
        }
    }

    pub fn corrupt_path(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Corruption {
            message: msg.into(),
            path: Some(path.into()),
        }
    }

    pub fn code(&self) -> ErrorCode {
        match self {
            Error::NotFound { .. } => ErrorCode::NotFound,
            Error::Validation(_) | Error::Singular(_) => ErrorCode::Validation,
            Error::Schema { .. } => ErrorCode::Schema,
            Error::State(_) | Error::Transition { .. } | Error::AlreadyExists { .. } => {
                ErrorCode::State
            }
            Error::Cycle { .. } => ErrorCode::Cycle,
            Error::Corruption { .. } | Error::IncompleteBundle { .. } | Error::Store(_) => {
                ErrorCode::Corruption
            }
            Error::Ordering { .. } => ErrorCode::Ordering,
            Error::Unsupported(_) => ErrorCode::Unsupported,
            Error::Inconclusive(_) => ErrorCode::Inconclusive,
            Error::Api { code, .. } => *code,
            Error::Unreachable(_) => ErrorCode::Corruption,
        }
    }

    /// Machine-readable context attached to the API error envelope.
    pub fn detail(&self) -> BTreeMap<String, Value> {
        let mut d = BTreeMap::new();
        match self {
            Error::NotFound { kind, id } => {
                d.insert("kind".into(), json!(kind));
                d.insert("id".into(), json!(id));
            }
            Error::Schema { row, columns, .. } => {
                if let Some(row) = row {
                    d.insert("row".into(), json!(row));
                }
                if !columns.is_empty() {
                    d.insert("columns".into(), json!(columns));
                }
            }
            Error::Transition { current, requested } => {
                d.insert("current".into(), json!(current));
                d.insert("requested".into(), json!(requested));
            }
            Error::AlreadyExists { kind, id } => {
                d.insert("reason".into(), json!("already_exists"));
                d.insert("kind".into(), json!(kind));
                d.insert("id".into(), json!(id));
            }
            Error::Cycle { kind, path } => {
                d.insert("kind".into(), json!(kind));
                d.insert("path".into(), json!(path));
            }
            Error::Corruption { path: Some(p), .. } => {
                d.insert("path".into(), json!(p));
            }
            Error::IncompleteBundle { path } => {
                d.insert("reason".into(), json!("incomplete_bundle"));
                d.insert("path".into(), json!(path));
            }
            Error::Ordering { expected, got } => {
                d.insert("expected".into(), json!(expected));
                d.insert("got".into(), json!(got));
            }
            Error::Singular(_) => {
                d.insert("reason".into(), json!("singular"));
            }
            Error::Store(_) => {
                d.insert("retriable".into(), json!(true));
            }
            Error::Api { detail, .. } => d.clone_from(detail),
            _ => {}
        }
        d
    }
}

impl From<rusqlite::Error> for Error {
    fn from(e: rusqlite::Error) -> Self {
        Error::Store(e.to_string())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Store(e.to_string())
    }
}

/// The closed set of error codes exposed over the API.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ErrorCode {
    NotFound,
    Validation,
    State,
    Cycle,
    Schema,
    Corruption,
    Ordering,
    Unsupported,
    Inconclusive,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 9] = [
        ErrorCode::NotFound,
        ErrorCode::Validation,
        ErrorCode::State,
        ErrorCode::Cycle,
        ErrorCode::Schema,
        ErrorCode::Corruption,
        ErrorCode::Ordering,
        ErrorCode::Unsupported,
        ErrorCode::Inconclusive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::NotFound => "not_found",
            ErrorCode::Validation => "validation",
            ErrorCode::State => "state",
            ErrorCode::Cycle => "cycle",
            ErrorCode::Schema => "schema",
            ErrorCode::Corruption => "corruption",
            ErrorCode::Ordering => "ordering",
            ErrorCode::Unsupported => "unsupported",
            ErrorCode::Inconclusive => "inconclusive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }

    pub fn http_status(self) -> u16 {
        match self {
            ErrorCode::NotFound => 404,
            ErrorCode::Validation | ErrorCode::Schema | ErrorCode::Ordering => 422,
            ErrorCode::State | ErrorCode::Cycle | ErrorCode::Inconclusive => 409,
            ErrorCode::Corruption => 500,
            ErrorCode::Unsupported => 501,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn code_strings_round_trip() {
        for c in ErrorCode::ALL {
            assert_eq!(ErrorCode::parse(c.as_str()), Some(c));
        }
        assert_eq!(ErrorCode::parse("teapot"), None);
    }

    #[test]
    fn status_mapping() {
        assert_eq!(Error::not_found("model", "x").code().http_status(), 404);
        assert_eq!(Error::schema("bad").code().http_status(), 422);
        let cyc = Error::Cycle {
            kind: "base_of".into(),
            path: vec!["A".into(), "B".into(), "A".into()],
        };
        assert_eq!(cyc.code().http_status(), 409);
        assert_eq!(cyc.to_string(), "edge would create a base_of cycle: A -> B -> A");
        assert_eq!(Error::Unsupported("x".into()).code().http_status(), 501);
        assert_eq!(Error::corruption("x").code().http_status(), 500);
    }
}
