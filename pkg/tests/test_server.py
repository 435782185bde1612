"""Workbench HTTP service contract."""

import io
import threading
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from protoscope import data as data_mod
from protoscope import server as server_mod
from protoscope.data import SyntheticSpec
from protoscope.model import ModelConfig, PrototypeClassifier
from protoscope.server import build_app


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("served-data")
    spec = SyntheticSpec(image_size=32, train_per_class=8, test_per_class=4,
                         confound_rate=0.5, seed=3)
    data_mod.generate(spec, root)
    (root / "resolved-config").write_text(
        "artifact_size_frac=0.25\nartifact_color=230,30,30\n"
        "artifact_margin=2\n")
    return root


@pytest.fixture(scope="module")
def checkpoint_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("served-ckpt")
    config = ModelConfig(image_size=32, num_prototypes=6, num_classes=2,
                         backbone=((4, 2), (8, 2)))
    model = PrototypeClassifier.init(config, seed=5)
    w = np.zeros((6, 2), dtype=np.float32)
    w[0, 0] = 2.0
    w[1, 1] = 1.5
    w[2, 0] = 0.7
    w[3, 1] = 0.3
    model.params["class_w"].data[:] = w
    model.save(root)
    return root


@pytest.fixture()
def client(checkpoint_dir, dataset_dir):
    app = build_app(checkpoint_dir, dataset_dir)
    with TestClient(app) as c:
        yield c


def wait_for_job(client, job_id, timeout=10.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        body = client.get(f"/jobs/{job_id}").json()
        if body["status"] != "running":
            return body
        time.sleep(0.02)
    raise TimeoutError(f"job {job_id} still running")


def png_bytes(size=32, seed=0):
    rng = np.random.default_rng(seed)
    array = rng.integers(0, 255, size=(size, size, 3), dtype=np.uint8)
    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# startup


def test_build_app_rejects_bad_paths(tmp_path, dataset_dir, checkpoint_dir):
    with pytest.raises(ValueError, match="checkpoint"):
        build_app(tmp_path / "nope", dataset_dir)
    with pytest.raises(ValueError, match="manifest"):
        build_app(checkpoint_dir, tmp_path / "nodata")


def test_session_summary(client):
    body = client.get("/session").json()
    assert body["version"] == 0
    assert body["num_prototypes"] == 6
    assert body["image_size"] == 32
    assert body["disabled"] == []
    assert body["subsets"]["train"] == 16
    assert body["subsets"]["test"] == 8
    assert body["subsets"]["counterfactual"] == 4


# ---------------------------------------------------------------------------
# prototypes


def test_list_prototypes_fresh_session(client):
    body = client.get("/prototypes").json()
    assert body["version"] == 0
    assert len(body["prototypes"]) == 6
    for row in body["prototypes"]:
        assert row["status"] == "active"
        assert len(row["class_weights"]) == 2
    assert body["prototypes"][0]["max_weight"] == pytest.approx(2.0)


def test_patches_endpoint_serves_assets(client):
    body = client.get("/prototypes/0/patches", params={"k": 3}).json()
    assert body["prototype_id"] == 0
    assert len(body["patches"]) == 3
    scores = [p["score"] for p in body["patches"]]
    assert scores == sorted(scores, reverse=True)
    for patch in body["patches"]:
        asset = client.get(patch["asset"])
        assert asset.status_code == 200
        with Image.open(io.BytesIO(asset.content)) as im:
            top, left, bottom, right = patch["rectangle"]
            assert im.size == (right - left, bottom - top)


def test_unknown_prototype_is_404(client):
    assert client.get("/prototypes/99/patches").status_code == 404
    assert client.post("/prototypes/99/disable").status_code == 404
    assert client.post("/prototypes/-1/enable").status_code == 404


def test_bad_k_is_422(client):
    assert client.get("/prototypes/0/patches",
                      params={"k": 0}).status_code == 422


# ---------------------------------------------------------------------------
# mutations, versioning, log


def test_disable_enable_cycle_bumps_version_and_logs(client):
    assert client.get("/prototypes").json()["version"] == 0

    body = client.post("/prototypes/1/disable").json()
    assert body == {"version": 1, "prototype_id": 1, "status": "disabled",
                    "disabled": [1]}
    listed = client.get("/prototypes").json()
    assert listed["version"] == 1
    row = listed["prototypes"][1]
    assert row["status"] == "disabled"
    assert row["class_weights"] == [0.0, 0.0]

    body = client.post("/prototypes/1/enable").json()
    assert body["version"] == 2
    assert body["disabled"] == []

    log = client.get("/log").json()["entries"]
    assert [(e["prototype_id"], e["action"]) for e in log] == [
        (1, "disable"), (1, "enable")]
    assert all(e["actor"] == "workbench" for e in log)


def test_metrics_recomputed_after_mutation(client):
    before = client.get("/metrics", params={"subset": "test"}).json()
    assert before["version"] == 0
    client.post("/prototypes/0/disable")
    after = client.get("/metrics", params={"subset": "test"}).json()
    assert after["version"] == 1
    assert after["metrics"]["global_size"] \
        == before["metrics"]["global_size"] - 1
    client.post("/prototypes/0/enable")
    restored = client.get("/metrics", params={"subset": "test"}).json()
    assert restored["metrics"] == before["metrics"]


def test_concurrent_disables_both_land(client):
    def hit(pid):
        assert client.post(f"/prototypes/{pid}/disable").status_code == 200

    threads = [threading.Thread(target=hit, args=(pid,)) for pid in (2, 3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    session = client.get("/session").json()
    assert session["disabled"] == [2, 3]
    assert session["version"] == 2
    log = client.get("/log").json()["entries"]
    assert sorted(e["prototype_id"] for e in log) == [2, 3]


# ---------------------------------------------------------------------------
# metrics


def test_metrics_shape_and_stability(client):
    body = client.get("/metrics", params={"subset": "test"})
    assert body.status_code == 200
    metrics = body.json()["metrics"]
    assert set(metrics) == {"accuracy", "f1", "sensitivity", "specificity",
                            "sparsity", "global_size", "mean_local_size",
                            "abstain_fraction"}
    again = client.get("/metrics", params={"subset": "test"})
    assert again.content == body.content


def test_metrics_unknown_subset_is_422(client):
    assert client.get("/metrics",
                      params={"subset": "bogus"}).status_code == 422


# ---------------------------------------------------------------------------
# evaluation jobs


def test_evaluate_job_roundtrip(client):
    submitted = client.post("/evaluate", json={"subset": "test"})
    assert submitted.status_code == 200
    job_id = submitted.json()["job_id"]
    done = wait_for_job(client, job_id)
    assert done["status"] == "done"
    direct = client.get("/metrics", params={"subset": "test"}).json()
    assert done["result"] == direct["metrics"]


def test_unknown_job_is_404(client):
    assert client.get("/jobs/doesnotexist").status_code == 404


def test_conflicting_evaluation_is_409(client, monkeypatch):
    release = threading.Event()
    real = server_mod.explain_mod.compute_metrics

    def slow(*args, **kwargs):
        release.wait(timeout=10)
        return real(*args, **kwargs)

    monkeypatch.setattr(server_mod.explain_mod, "compute_metrics", slow)
    first = client.post("/evaluate", json={"subset": "test"}).json()
    conflict = client.post("/evaluate", json={"subset": "test"})
    assert conflict.status_code == 409
    # a different subset is not in conflict
    other = client.post("/evaluate", json={"subset": "train"})
    assert other.status_code == 200
    release.set()
    assert wait_for_job(client, first["job_id"])["status"] == "done"
    assert wait_for_job(client, other.json()["job_id"])["status"] == "done"
    # once finished, the subset is free again
    assert client.post("/evaluate",
                       json={"subset": "test"}).status_code == 200


def test_evaluate_malformed_body_is_422(client):
    assert client.post("/evaluate", json={}).status_code == 422
    assert client.post("/evaluate",
                       json={"subset": "bogus"}).status_code == 422


# ---------------------------------------------------------------------------
# predict


def test_predict_roundtrip(client):
    response = client.post(
        "/predict", files={"file": ("img.png", png_bytes(), "image/png")})
    assert response.status_code == 200
    body = response.json()
    assert set(body) == {"version", "label", "abstained", "scores",
                         "explanation"}
    assert len(body["scores"]) == 2
    for entry in body["explanation"]["entries"]:
        assert entry["presence"] > 0.1
        assert len(entry["rectangle"]) == 4


def test_predict_rejects_garbage_and_wrong_size(client):
    bad = client.post("/predict",
                      files={"file": ("x.png", b"not a png", "image/png")})
    assert bad.status_code == 422
    wrong = client.post(
        "/predict", files={"file": ("x.png", png_bytes(size=16), "image/png")})
    assert wrong.status_code == 422
    assert "32x32" in wrong.json()["detail"]
    missing = client.post("/predict")
    assert missing.status_code == 422


# ---------------------------------------------------------------------------
# shortcuts and counterfactual


def test_shortcuts_endpoint(client):
    body = client.get("/shortcuts", params={"presence_thr": 0.1,
                                            "overlap_thr": 0.2}).json()
    assert body["presence_thr"] == 0.1
    assert body["overlap_thr"] == 0.2
    assert len(body["prototypes"]) == 6
    for row in body["prototypes"]:
        assert row["flagged"] == (row["activation_count"] > 0
                                  and row["overlap_fraction"] >= 0.2)


def test_counterfactual_endpoint(client):
    body = client.post("/counterfactual", json={"target_class": 1}).json()
    assert [r["subset"] for r in body["rows"]] == [
        "full", "excluding_artifacted", "target_with_artifact",
        "other_with_artifact"]
    assert body["target_class"] == 1
    assert body["version"] == 0
    for row in body["rows"]:
        for side in ("original", "adapted"):
            assert 0.0 <= row[side]["accuracy"] <= 1.0
