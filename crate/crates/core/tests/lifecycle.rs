mod common;

use common::{params, Harness};
use mmgr_core::agent::{generate_training_csv, run_agent, AgentOptions, ProcessSpec};
use mmgr_core::api::Method;
use serde_json::json;

const SIGMA: f64 = 0.1;

fn seed_model(h: &Harness, process: &ProcessSpec) -> (String, String) {
    let ds = h.ok(Method::Post, "/datasets", br#"{"name":"plant"}"#);
    let ds_id = ds["id"].as_str().unwrap();
    let csv = generate_training_csv(process, 1000, 11).unwrap();
    let snap = h.ok(Method::Post, &format!("/datasets/{ds_id}/snapshots"), &csv);
    let snap_id = snap["id"].as_str().unwrap().to_string();
    let body = json!({"name": "m", "snapshot": snap_id, "features": ["x"], "target": "y"}).to_string();
    let trained = h.ok(Method::Post, "/train", body.as_bytes());
    let model = trained["model"]["id"].as_str().unwrap().to_string();
    let verdict = h.ok(Method::Post, &format!("/models/{model}/gate"), b"");
    assert_eq!(verdict["passed"], true, "{verdict}");
    h.ok(Method::Post, &format!("/models/{model}/status"), br#"{"status":"validated"}"#);
    let dep = h.ok(
        Method::Post,
        "/deployments",
        json!({"model_id": model, "target": "edge-1"}).to_string().as_bytes(),
    );
    (model, dep["id"].as_str().unwrap().to_string())
}

#[test]
fn drift_triggers_retune_and_redeploy() {
    let h = Harness::new();
    let process = ProcessSpec::single(-1.0, 1.0, 2.0, 1.0, SIGMA, 5).with_drift(1000, vec![-2.0], 1.0);
    let (model, dep) = seed_model(&h, &process);
    let mut client = h.client();
    let req = client.request("deployment.bundle", &params(&[("id", &dep)])).unwrap();
    let bundle = client.send(&req).unwrap().body;

    let report = run_agent(&bundle, &dep, &process, 3000, &mut client, &AgentOptions::default()).unwrap();

    assert_eq!(report.alarms.len(), 1, "{:?}", report.alarms);
    assert!(report.alarms[0].alarm_at > 1000 && report.alarms[0].alarm_at < 1050);
    assert_eq!(report.swaps.len(), 1, "{:?}", report.swaps);
    assert_ne!(report.swaps[0].model_id, model);
    assert!(report.summary.tail_rmse <= 1.5 * SIGMA, "tail rmse {}", report.summary.tail_rmse);

    let jobs = h.ok(Method::Get, "/jobs", b"");
    assert_eq!(jobs.as_array().unwrap().len(), 1);
    assert_eq!(jobs[0]["status"], "succeeded", "{jobs}");
    let audit = h.ok(Method::Get, "/audit", b"");
    assert_eq!(audit["ok"], true, "{audit}");

    let old = h.ok(Method::Get, &format!("/models/{model}"), b"");
    assert_eq!(old["status"], "retired");
}

#[test]
fn same_alarm_delivered_twice_yields_one_job() {
    let h = Harness::new();
    let process = ProcessSpec::single(-1.0, 1.0, 2.0, 1.0, SIGMA, 5).with_drift(100, vec![-2.0], 1.0);
    let (_, dep) = seed_model(&h, &process);
    let mut client = h.client();
    let req = client.request("deployment.bundle", &params(&[("id", &dep)])).unwrap();
    let bundle = client.send(&req).unwrap().body;
    let opts = AgentOptions {
        poll_interval: 0,
        ..AgentOptions::default()
    };
    let report = run_agent(&bundle, &dep, &process, 200, &mut client, &opts).unwrap();
    let alarm_at = report.alarms[0].alarm_at;
    let body = json!({"deployment_id": dep, "alarm_at": alarm_at}).to_string();
    let a = h.ok(Method::Post, "/alarms/deliver", body.as_bytes());
    let b = h.ok(Method::Post, "/alarms/deliver", body.as_bytes());
    assert_eq!(a["id"], b["id"]);
    assert_eq!(h.ok(Method::Get, "/jobs", b"").as_array().unwrap().len(), 1);
}
