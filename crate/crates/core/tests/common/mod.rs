#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use mmgr_core::api::{ApiRequest, Client, Method, Service};
use mmgr_core::clock::StepClock;
use mmgr_core::config::{Config, JobMode};
use mmgr_core::registry::Registry;
use serde_json::{json, Value};
use tempfile::TempDir;

pub struct Harness {
    pub dir: TempDir,
    pub service: Arc<Service>,
}

impl Harness {
    pub fn new() -> Self {
        Self::with_config(Config::default())
    }

    pub fn with_config(config: Config) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let registry = Registry::open(dir.path(), config, Arc::new(StepClock::new())).unwrap();
        let service = Arc::new(Service::new(Arc::new(registry), JobMode::Inline, 1));
        Self { dir, service }
    }

    pub fn registry(&self) -> &Registry {
        self.service.registry()
    }

    pub fn client(&self) -> Client<Arc<Service>> {
        Client::new(self.service.clone())
    }

    /// Sends a request and returns (status, parsed JSON or Null).
    pub fn call(&self, method: Method, url: &str, body: &[u8]) -> (u16, Value) {
        let req = ApiRequest::from_url(method, url, body.to_vec());
        let resp = self.service.handle(&req);
        let v = serde_json::from_slice(&resp.body).unwrap_or(Value::Null);
        (resp.status, v)
    }

    pub fn ok(&self, method: Method, url: &str, body: &[u8]) -> Value {
        let (status, v) = self.call(method, url, body);
        assert!((200..300).contains(&status), "{} {url} -> {status}: {v}", method.as_str());
        v
    }
}

impl Harness {
    /// Creates a dataset holding one snapshot; returns (dataset, snapshot).
    pub fn dataset(&self, name: &str, csv: &[u8]) -> (String, String) {
        let ds = self.ok(Method::Post, "/datasets", json!({ "name": name }).to_string().as_bytes());
        let ds = ds["id"].as_str().unwrap().to_string();
        let snap = self.ok(Method::Post, &format!("/datasets/{ds}/snapshots"), csv);
        (ds, snap["id"].as_str().unwrap().to_string())
    }

    pub fn train(&self, name: &str, snapshot: &str, features: &[&str], target: &str) -> String {
        let body = json!({"name": name, "snapshot": snapshot, "features": features, "target": target});
        let v = self.ok(Method::Post, "/train", body.to_string().as_bytes());
        v["model"]["id"].as_str().unwrap().to_string()
    }

    /// Gates and validates `model`, panicking if the gate fails.
    pub fn validate(&self, model: &str) {
        let verdict = self.ok(Method::Post, &format!("/models/{model}/gate"), b"");
        assert_eq!(verdict["passed"], true, "{verdict}");
        self.ok(Method::Post, &format!("/models/{model}/status"), br#"{"status":"validated"}"#);
    }

    pub fn deploy(&self, model: &str, target: &str) -> String {
        let body = json!({"model_id": model, "target": target});
        let v = self.ok(Method::Post, "/deployments", body.to_string().as_bytes());
        v["id"].as_str().unwrap().to_string()
    }

    pub fn link(&self, from: &str, to: &str, kind: &str) {
        let body = json!({"from": from, "to": to, "kind": kind});
        self.ok(Method::Post, "/links", body.to_string().as_bytes());
    }

    pub fn audit_ok(&self) {
        let audit = self.ok(Method::Get, "/audit", b"");
        assert_eq!(audit["ok"], true, "{audit}");
    }
}

pub fn params(pairs: &[(&'static str, &str)]) -> BTreeMap<&'static str, String> {
    pairs.iter().map(|(k, v)| (*k, v.to_string())).collect()
}
