"""Smoke test for the `mmgr` Python bindings.

Build and install the extension first:

    pip install --no-build-isolation -e crates/py

then run `python python/smoke_test.py`. Exits non-zero on the first failure.
"""

import random
import tempfile

import mmgr


def line_csv(rows, slope, intercept, seed):
    rng = random.Random(seed)
    lines = ["x,y"]
    for _ in range(rows):
        x = rng.uniform(-1.0, 1.0)
        lines.append(f"{x!r},{slope * x + intercept + rng.gauss(0.0, 0.1)!r}")
    return "\n".join(lines) + "\n"


def check_numeric_core():
    model = mmgr.fit({"x": [0.0, 1.0, 2.0, 3.0], "y": [1.0, 3.0, 5.0, 7.0]}, ["x"], "y")
    assert abs(model["coefficients"][0] - 2.0) < 1e-12, model
    assert abs(model["intercept"] - 1.0) < 1e-12, model

    quiet = [0.1] * 200
    assert mmgr.page_hinkley(quiet, 0.05, 2.5) is None
    alarm = mmgr.page_hinkley(quiet + [3.0] * 50, 0.05, 2.5)
    assert alarm is not None and alarm > 200, alarm

    edges = [("b", "compatible_with", "a"), ("c", "newer_recording_of", "a"), ("a", "newer_recording_of", "d")]
    assert mmgr.evaluation_scope(edges, "a") == ["a", "b", "c"]

    names = {op["name"] for op in mmgr.operations()}
    assert {"model.train", "deployment.bundle", "audit.run"} <= names


def check_registry(data_dir):
    svc = mmgr.Service(data_dir=data_dir)
    assert svc.call("health")["status"] == "ok"

    ds = svc.call("dataset.create", body={"name": "plant"})["id"]
    snap = svc.call("snapshot.ingest", {"id": ds}, line_csv(300, 2.0, 1.0, 7))["id"]
    trained = svc.call(
        "model.train",
        body={"name": "plant-model", "snapshot": snap, "features": ["x"], "target": "y"},
    )
    model = trained["model"]["id"]
    assert svc.call("model.gate", {"id": model})["passed"] is True
    svc.call("model.status", {"id": model}, {"status": "validated"})
    assert svc.call("model.reproduce", {"id": model})["identical"] is True

    dep = svc.call("deployment.create", body={"model_id": model, "target": "edge-1"})["id"]
    archive = svc.call("deployment.bundle", {"id": dep})
    assert isinstance(archive, bytes) and archive
    manifest = mmgr.verify_bundle(archive)
    assert manifest["model"]["id"] == model, manifest

    tampered = bytearray(archive)
    tampered[len(tampered) // 2] ^= 0x01
    try:
        mmgr.verify_bundle(bytes(tampered))
    except mmgr.MmgrError as e:
        assert e.code in {"corruption", "validation", "unsupported"}, e.code
    else:
        raise AssertionError("tampered bundle verified")

    links = svc.call("link.list", {"kind": "trained_on"})
    assert any(l["from"] == model and l["to"] == snap for l in links), links
    assert svc.call("model.list", {"name": "plant-model"})[0]["status"] == "deployed"

    try:
        svc.call("model.show", {"id": "missing"})
    except mmgr.MmgrError as e:
        assert e.code == "not_found", e.code
    else:
        raise AssertionError("unknown model was found")

    assert svc.call("audit.run")["ok"] is True


def main():
    check_numeric_core()
    with tempfile.TemporaryDirectory() as d:
        check_registry(d)
    print("smoke test passed")


if __name__ == "__main__":
    main()
