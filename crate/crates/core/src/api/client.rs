use std::collections::BTreeMap;
use std::time::Duration;

use serde::de::DeserializeOwned;

use super::{encode_segment, find_op, ApiRequest, ApiResponse, Caller, Method};
use crate::agent::Transport;
use crate::drift::{to_ndjson, FeedbackEvent};
use crate::error::{Error, Result};
use crate::registry::{DeploymentCommand, IngestResult};

/// Sends requests to a running service over HTTP.
pub struct HttpCaller {
    base: String,
    agent: ureq::Agent,
}

impl HttpCaller {
    /// `endpoint` is a base URL such as `http://127.0.0.1:7878`.
    pub fn new(endpoint: &str) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(300)))
            .build();
        Self {
            base: endpoint.trim_end_matches('/').to_string(),
            agent: config.into(),
        }
    }
}

impl Caller for HttpCaller {
    fn call(&self, req: &ApiRequest) -> Result<ApiResponse> {
        let url = format!("{}{}", self.base, req.url());
        let unreachable = |e: ureq::Error| Error::Unreachable(format!("{url}: {e}"));
        let response = match req.method {
            Method::Get => self.agent.get(&url).call(),
            Method::Delete => self.agent.delete(&url).call(),
            Method::Post => self.agent.post(&url).send(&req.body[..]),
        };
        let mut response = response.map_err(unreachable)?;
        let status = response.status().as_u16();
        let content_type = match response.headers().get("content-type").and_then(|v| v.to_str().ok()) {
            Some(ct) if ct.starts_with(super::NDJSON) => super::NDJSON,
            Some(ct) if ct.starts_with(super::CSV) => super::CSV,
            Some(ct) if ct.starts_with("text/plain") => super::TEXT,
            Some(ct) if ct.starts_with(super::OCTETS) => super::OCTETS,
            _ => super::JSON,
        };
        let body = response
            .body_mut()
            .with_config()
            .limit(super::MAX_BODY as u64)
            .read_to_vec()
            .map_err(unreachable)?;
        Ok(ApiResponse {
            status,
            content_type,
            body,
        })
    }
}

/// Calls operations by name over any [`Caller`].
pub struct Client<C> {
    caller: C,
}

impl<C: Caller> Client<C> {
    pub fn new(caller: C) -> Self {
        Self { caller }
    }

    pub fn caller(&self) -> &C {
        &self.caller
    }

    /// Builds the request for operation `name`, filling its path template
    /// from `params`.
    pub fn request(&self, name: &str, params: &BTreeMap<&str, String>) -> Result<ApiRequest> {
        let op = find_op(name).ok_or_else(|| Error::validation(format!("unknown operation {name}")))?;
        let mut path = String::new();
        for seg in op.path.split('/').skip(1) {
            path.push('/');
            match seg.strip_prefix('{').and_then(|s| s.strip_suffix('}')) {
                Some(p) => {
                    let v = params
                        .get(p)
                        .ok_or_else(|| Error::validation(format!("{name} needs parameter {p}")))?;
                    path.push_str(&encode_segment(v));
                }
                None => path.push_str(seg),
            }
        }
        Ok(ApiRequest::new(op.method, path))
    }

    /// Sends a request; error envelopes become [`Error::Api`].
    pub fn send(&self, req: &ApiRequest) -> Result<ApiResponse> {
        self.caller.call(req)?.into_result()
    }

    pub fn send_json<T: DeserializeOwned>(&self, req: &ApiRequest) -> Result<T> {
        let resp = self.send(req)?;
        serde_json::from_slice(&resp.body).map_err(|e| Error::corruption(format!("unexpected response: {e}")))
    }

    fn by_id(&self, name: &str, id: &str) -> Result<ApiRequest> {
        self.request(name, &BTreeMap::from([("id", id.to_string())]))
    }
}

impl<C: Caller> Transport for Client<C> {
    fn send_feedback(&mut self, deployment_id: &str, events: &[FeedbackEvent]) -> Result<IngestResult> {
        let req = self.by_id("feedback.ingest", deployment_id)?.body(to_ndjson(events));
        self.send_json(&req)
    }

    fn poll_command(&mut self, deployment_id: &str) -> Result<DeploymentCommand> {
        let req = self.by_id("deployment.command", deployment_id)?;
        self.send_json(&req)
    }

    fn fetch_bundle(&mut self, deployment_id: &str) -> Result<Vec<u8>> {
        let req = self.by_id("deployment.bundle", deployment_id)?;
        Ok(self.send(&req)?.body)
    }
}
