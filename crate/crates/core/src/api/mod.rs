//! HTTP/JSON interface.
//!
//! Every capability is declared once in [`OPS`]; the router, the CLI and
//! the reference document are all driven by that table. Requests and
//! responses are transport-neutral ([`ApiRequest`], [`ApiResponse`]) so the
//! same [`Service`] answers both the HTTP server and in-process callers.

mod client;
mod doc;
mod ops;
mod router;
mod server;

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::{json, Value};

use crate::bundle::canonical_json;
use crate::error::{Error, ErrorCode, Result};

pub use client::{Client, HttpCaller};
pub use doc::reference_document;
pub use ops::{find_op, BodyKind, OpSpec, ReplyKind, OPS};
pub use router::Service;
pub use server::serve;

pub const JSON: &str = "application/json";
pub const NDJSON: &str = "application/x-ndjson";
pub const CSV: &str = "text/csv";
pub const OCTETS: &str = "application/octet-stream";
pub const TEXT: &str = "text/plain; charset=utf-8";

/// Request bodies above this size are rejected.
pub const MAX_BODY: usize = 256 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Get,
    Post,
    Delete,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Get => "GET",
            Method::Post => "POST",
            Method::Delete => "DELETE",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "GET" => Some(Method::Get),
            "POST" => Some(Method::Post),
            "DELETE" => Some(Method::Delete),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiRequest {
    pub method: Method,
    /// Path without the query string, percent-encoded as on the wire.
    pub path: String,
    pub query: BTreeMap<String, String>,
    pub body: Vec<u8>,
}

impl ApiRequest {
    pub fn new(method: Method, path: impl Into<String>) -> Self {
        Self {
            method,
            path: path.into(),
            query: BTreeMap::new(),
            body: Vec::new(),
        }
    }

    pub fn query(mut self, key: &str, value: impl ToString) -> Self {
        self.query.insert(key.into(), value.to_string());
        self
    }

    pub fn body(mut self, body: impl Into<Vec<u8>>) -> Self {
        self.body = body.into();
        self
    }

    pub fn json<T: Serialize>(self, value: &T) -> Self {
        self.body(canonical_json(value))
    }

    /// Splits `path?query` as received from a socket.
    pub fn from_url(method: Method, url: &str, body: Vec<u8>) -> Self {
        let (path, query) = url.split_once('?').unwrap_or((url, ""));
        Self {
            method,
            path: path.to_string(),
            query: form_urlencoded::parse(query.as_bytes()).into_owned().collect(),
            body,
        }
    }

    pub fn url(&self) -> String {
        if self.query.is_empty() {
            return self.path.clone();
        }
        let q = form_urlencoded::Serializer::new(String::new()).extend_pairs(&self.query).finish();
        format!("{}?{q}", self.path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiResponse {
    pub status: u16,
    pub content_type: &'static str,
    pub body: Vec<u8>,
}

impl ApiResponse {
    pub fn json<T: Serialize>(status: u16, value: &T) -> Self {
        Self {
            status,
            content_type: JSON,
            body: canonical_json(value),
        }
    }

    pub fn error(e: &Error) -> Self {
        let code = e.code();
        Self::json(code.http_status(), &error_envelope(e))
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    pub fn json_value(&self) -> Result<Value> {
        serde_json::from_slice(&self.body).map_err(|e| Error::corruption(format!("response is not JSON: {e}")))
    }

    /// Turns an error envelope back into an [`Error::Api`].
    pub fn into_result(self) -> Result<Self> {
        if self.is_success() {
            return Ok(self);
        }
        let v: Value = serde_json::from_slice(&self.body).unwrap_or(Value::Null);
        let err = &v["error"];
        let code = err["code"].as_str().and_then(ErrorCode::parse).ok_or_else(|| {
            Error::corruption(format!("service answered {} without an error envelope", self.status))
        })?;
        let detail = err["detail"]
            .as_object()
            .map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
            .unwrap_or_default();
        Err(Error::Api {
            code,
            message: err["message"].as_str().unwrap_or_default().to_string(),
            detail,
        })
    }
}

/// `{"error": {"code", "message", "detail"}}`
pub fn error_envelope(e: &Error) -> Value {
    json!({
        "error": {
            "code": e.code().as_str(),
            "message": e.to_string(),
            "detail": e.detail(),
        }
    })
}

/// Anything that can answer an [`ApiRequest`].
pub trait Caller: Send + Sync {
    /// Transport failures are reported as [`Error::Unreachable`]; error
    /// envelopes come back as ordinary responses.
    fn call(&self, req: &ApiRequest) -> Result<ApiResponse>;
}

impl Caller for Service {
    fn call(&self, req: &ApiRequest) -> Result<ApiResponse> {
        Ok(self.handle(req))
    }
}

impl<C: Caller + ?Sized> Caller for &C {
    fn call(&self, req: &ApiRequest) -> Result<ApiResponse> {
        (**self).call(req)
    }
}

impl<C: Caller + ?Sized> Caller for std::sync::Arc<C> {
    fn call(&self, req: &ApiRequest) -> Result<ApiResponse> {
        (**self).call(req)
    }
}

impl<C: Caller + ?Sized> Caller for Box<C> {
    fn call(&self, req: &ApiRequest) -> Result<ApiResponse> {
        (**self).call(req)
    }
}

const SEGMENT: &percent_encoding::AsciiSet = &percent_encoding::NON_ALPHANUMERIC
    .remove(b'-')
    .remove(b'_')
    .remove(b'.')
    .remove(b'~')
    .remove(b'@');

/// Percent-encodes one path segment.
pub fn encode_segment(s: &str) -> String {
    percent_encoding::utf8_percent_encode(s, SEGMENT).to_string()
}
