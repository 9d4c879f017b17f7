mod common;

use std::sync::{mpsc, Arc};
use std::time::Duration;

use common::{params, Harness};
use mmgr_core::api::{reference_document, serve, ApiRequest, Caller, Client, HttpCaller, Method, Service, OPS};
use mmgr_core::clock::StepClock;
use mmgr_core::config::{Config, JobMode};
use mmgr_core::registry::Registry;
use mmgr_core::ErrorCode;
use serde_json::{json, Value};

#[test]
fn unknown_model_is_not_found() {
    let h = Harness::new();
    let (status, v) = h.call(Method::Get, "/models/unknown", b"");
    assert_eq!(status, 404);
    assert_eq!(v["error"]["code"], "not_found");
    assert!(v["error"]["message"].as_str().unwrap().contains("unknown"));
}

#[test]
fn ragged_csv_is_a_schema_error_with_row_index() {
    let h = Harness::new();
    let ds = h.ok(Method::Post, "/datasets", br#"{"name":"d"}"#);
    let url = format!("/datasets/{}/snapshots", ds["id"].as_str().unwrap());
    let (status, v) = h.call(Method::Post, &url, b"x,y\n0,1\n1,3,5\n");
    assert_eq!(status, 422);
    assert_eq!(v["error"]["code"], "schema");
    assert_eq!(v["error"]["detail"]["row"], 2);
}

#[test]
fn base_of_cycle_is_rejected_with_its_path() {
    let h = Harness::new();
    let (a, _) = h.dataset("a", b"x,y\n0,1\n");
    let (b, _) = h.dataset("b", b"x,y\n0,1\n");
    let (c, _) = h.dataset("c", b"x,y\n0,1\n");
    h.link(&a, &b, "base_of");
    h.link(&b, &c, "base_of");
    let body = json!({"from": c, "to": a, "kind": "base_of"}).to_string();
    let (status, v) = h.call(Method::Post, "/links", body.as_bytes());
    assert_eq!(status, 409);
    assert_eq!(v["error"]["code"], "cycle");
    let path: Vec<&str> = v["error"]["detail"]["path"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s.as_str().unwrap())
        .collect();
    assert_eq!(path.first(), Some(&a.as_str()));
    assert!(path.contains(&b.as_str()) && path.contains(&c.as_str()));
    let links = h.ok(Method::Get, "/links?kind=base_of", b"");
    assert_eq!(links.as_array().unwrap().len(), 2);
}

#[test]
fn routing_errors_are_mapped() {
    let h = Harness::new();
    let (status, v) = h.call(Method::Get, "/nowhere", b"");
    assert_eq!((status, v["error"]["code"].as_str()), (404, Some("not_found")));
    let (status, v) = h.call(Method::Delete, "/datasets", b"");
    assert_eq!((status, v["error"]["code"].as_str()), (422, Some("validation")));
    let (status, v) = h.call(Method::Get, "/models?colour=red", b"");
    assert_eq!((status, v["error"]["code"].as_str()), (422, Some("validation")));
    let (status, v) = h.call(Method::Get, "/datasets", b"payload");
    assert_eq!((status, v["error"]["code"].as_str()), (422, Some("validation")));
    let (status, v) = h.call(Method::Post, "/datasets", b"{not json");
    assert_eq!((status, v["error"]["code"].as_str()), (422, Some("validation")));
}

#[test]
fn responses_are_canonical_and_repeatable() {
    let h = Harness::new();
    let (_, snap) = h.dataset("d", b"x,y\n0,1\n1,3\n2,5.5\n3,7\n");
    let model = h.train("m", &snap, &["x"], "y");
    let req = ApiRequest::new(Method::Get, format!("/models/{model}"));
    let first = h.service.handle(&req).body;
    let second = h.service.handle(&req).body;
    assert_eq!(first, second);
    let parsed: Value = serde_json::from_slice(&first).unwrap();
    let keys: Vec<&String> = parsed.as_object().unwrap().keys().collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    assert_eq!(serde_json::to_vec(&parsed).unwrap(), first);
}

#[test]
fn every_error_code_has_one_status() {
    for code in ErrorCode::ALL {
        let expected = match code.as_str() {
            "not_found" => 404,
            "validation" | "schema" | "ordering" => 422,
            "state" | "cycle" | "inconclusive" => 409,
            "corruption" => 500,
            "unsupported" => 501,
            other => panic!("unexpected code {other}"),
        };
        assert_eq!(code.http_status(), expected, "{}", code.as_str());
    }
}

#[test]
fn reference_document_lists_every_operation() {
    let doc = reference_document();
    for op in OPS {
        let entry = &doc["paths"][op.path][op.method.as_str().to_ascii_lowercase()];
        assert_eq!(entry["operationId"], op.name);
        assert_eq!(entry["x-cli"], format!("mmgr {}", op.cli));
    }
    let h = Harness::new();
    assert_eq!(h.ok(Method::Get, "/reference", b""), doc);
}

#[test]
fn background_jobs_answer_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let registry = Arc::new(Registry::open(dir.path(), Config::default(), Arc::new(StepClock::new())).unwrap());
    let service = Service::new(registry.clone(), JobMode::Background, 2);
    let call = |m: Method, url: &str, body: &[u8]| {
        let resp = service.handle(&ApiRequest::from_url(m, url, body.to_vec()));
        (resp.status, serde_json::from_slice::<Value>(&resp.body).unwrap())
    };
    let (_, ds) = call(Method::Post, "/datasets", br#"{"name":"d"}"#);
    let csv = "x,y\n0,1\n1,3\n2,5.1\n3,7\n4,8.9\n";
    let (_, snap) = call(Method::Post, &format!("/datasets/{}/snapshots", ds["id"].as_str().unwrap()), csv.as_bytes());
    let snap = snap["id"].as_str().unwrap();
    let body = json!({"name": "m", "snapshot": snap, "features": ["x"], "target": "y"}).to_string();
    let (_, trained) = call(Method::Post, "/train", body.as_bytes());
    let model = trained["model"]["id"].as_str().unwrap();
    let body = json!({"source_model": model, "snapshot": snap, "name": "m2"}).to_string();
    let (status, job) = call(Method::Post, "/jobs", body.as_bytes());
    assert_eq!(status, 202);
    assert!(service.runner().wait_idle(Duration::from_secs(30)).unwrap());
    let (_, job) = call(Method::Get, &format!("/jobs/{}", job["id"].as_str().unwrap()), b"");
    assert!(job["status"] == "succeeded" || job["status"] == "failed", "{job}");
    assert!(job["result_model"].is_string() || job["failure"].is_string());
}

fn start_server(h: &Harness) -> String {
    let (tx, rx) = mpsc::channel();
    let service = h.service.clone();
    std::thread::spawn(move || {
        serve(service, "127.0.0.1:0", 2, |addr| tx.send(addr.to_string()).unwrap()).unwrap();
    });
    format!("http://{}", rx.recv_timeout(Duration::from_secs(10)).unwrap())
}

#[test]
fn http_round_trip_matches_in_process_service() {
    let h = Harness::new();
    let endpoint = start_server(&h);
    let http = Client::new(HttpCaller::new(&endpoint));
    let health: Value = http.send_json(&http.request("health", &params(&[])).unwrap()).unwrap();
    assert_eq!(health["status"], "ok");

    let req = http.request("dataset.create", &params(&[])).unwrap().body(r#"{"name":"over http"}"#);
    let ds: Value = http.send_json(&req).unwrap();
    let id = ds["id"].as_str().unwrap();
    let req = http
        .request("snapshot.ingest", &params(&[("id", id)]))
        .unwrap()
        .body("x,y\n0,1\n1,2\n");
    let snap: Value = http.send_json(&req).unwrap();
    let data_req = http.request("snapshot.data", &params(&[("id", snap["id"].as_str().unwrap())])).unwrap();
    let over_http = http.send(&data_req).unwrap();
    let in_process = h.service.call(&data_req).unwrap();
    assert_eq!(over_http.body, in_process.body);
    assert_eq!(over_http.content_type, in_process.content_type);

    let err = http.send(&http.request("model.show", &params(&[("id", "nope")])).unwrap()).unwrap_err();
    assert_eq!(err.code(), ErrorCode::NotFound);

    let raw = HttpCaller::new(&endpoint)
        .call(&ApiRequest::from_url(Method::Get, "/models?name=a%20b", Vec::new()))
        .unwrap();
    assert_eq!(raw.status, 200);
    assert_eq!(raw.body, b"[]");
}

#[test]
fn unreachable_service_is_reported() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let http = Client::new(HttpCaller::new(&format!("http://{addr}")));
    let err = http.send(&http.request("health", &params(&[])).unwrap()).unwrap_err();
    assert!(err.to_string().contains("cannot reach service"), "{err}");
}
