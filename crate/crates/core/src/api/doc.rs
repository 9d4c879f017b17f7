use serde_json::{json, Map, Value};

use super::ops::{BodyKind, ReplyKind, OPS};
use super::{CSV, JSON, NDJSON, OCTETS, TEXT};
use crate::error::ErrorCode;

/// OpenAPI-style description of every operation, generated from [`OPS`].
pub fn reference_document() -> Value {
    let mut paths: Map<String, Value> = Map::new();
    for op in OPS {
        let mut params: Vec<Value> = op
            .path_params()
            .into_iter()
            .map(|p| json!({"name": p, "in": "path", "required": true, "schema": {"type": "string"}}))
            .collect();
        params.extend(
            op.query
                .iter()
                .map(|q| json!({"name": q, "in": "query", "required": false, "schema": {"type": "string"}})),
        );
        let mut responses = Map::new();
        let reply_type = match op.reply {
            ReplyKind::Json => JSON,
            ReplyKind::Csv => CSV,
            ReplyKind::Ndjson => NDJSON,
            ReplyKind::Binary => OCTETS,
            ReplyKind::Text => TEXT,
        };
        responses.insert(op.status.to_string(), json!({"description": "success", "content": {reply_type: {}}}));
        if op.background {
            responses.insert(
                "202".into(),
                json!({"description": "job accepted; runs in the background", "content": {JSON: {}}}),
            );
        }
        let mut statuses: Vec<u16> = ErrorCode::ALL.iter().map(|c| c.http_status()).collect();
        statuses.sort_unstable();
        statuses.dedup();
        for s in statuses {
            let codes: Vec<&str> = ErrorCode::ALL
                .iter()
                .filter(|c| c.http_status() == s)
                .map(|c| c.as_str())
                .collect();
            responses.insert(
                s.to_string(),
                json!({"description": format!("error envelope; code one of {}", codes.join(", ")), "content": {JSON: {}}}),
            );
        }
        let mut entry = json!({
            "operationId": op.name,
            "summary": op.summary,
            "x-cli": format!("mmgr {}", op.cli),
            "parameters": params,
            "responses": responses,
        });
        let body_type = match op.body {
            BodyKind::None => None,
            BodyKind::Json => Some(JSON),
            BodyKind::Csv => Some(CSV),
            BodyKind::Ndjson => Some(NDJSON),
            BodyKind::Binary => Some(OCTETS),
        };
        if let Some(t) = body_type {
            entry["requestBody"] = json!({"content": {t: {}}});
        }
        let item = paths.entry(op.path.to_string()).or_insert_with(|| json!({}));
        item[op.method.as_str().to_ascii_lowercase()] = entry;
    }
    json!({
        "openapi": "3.0.3",
        "info": {"title": "mmgr", "version": env!("CARGO_PKG_VERSION")},
        "paths": paths,
        "components": {
            "schemas": {
                "ApiError": {
                    "type": "object",
                    "properties": {
                        "error": {
                            "type": "object",
                            "properties": {
                                "code": {"type": "string", "enum": ErrorCode::ALL.iter().map(|c| c.as_str()).collect::<Vec<_>>()},
                                "message": {"type": "string"},
                                "detail": {"type": "object"}
                            },
                            "required": ["code", "message", "detail"]
                        }
                    }
                }
            }
        }
    })
}
