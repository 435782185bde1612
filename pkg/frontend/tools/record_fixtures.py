"""Record real API payloads for the frontend contract tests.

Spins the workbench service over a small synthetic dataset and a rigged
checkpoint, walks the canonical review session (browse -> shortcuts ->
disable flagged -> re-evaluate -> counterfactual -> inspect), and saves
every response verbatim under tests/fixtures/. The vitest suite replays
these files, so UI numbers are checked against genuine server output.

Usage: python3 tools/record_fixtures.py
"""

import json
import pathlib
import shutil
import sys
import tempfile
import time

import numpy as np
from fastapi.testclient import TestClient

from protoscope import data as data_mod
from protoscope import debug as debug_mod
from protoscope.data import SyntheticSpec
from protoscope.model import ModelConfig, PrototypeClassifier
from protoscope.server import build_app

FIXTURES = pathlib.Path(__file__).resolve().parent.parent / "tests" / "fixtures"

THRESHOLD_LADDER = [(0.1, 0.2), (0.1, 0.15), (0.1, 0.1), (0.1, 0.05),
                    (0.05, 0.05), (0.05, 0.02)]


def save(name: str, payload) -> None:
    path = FIXTURES / name
    path.write_text(json.dumps(payload, indent=2) + "\n")
    print(f"  wrote {path.relative_to(FIXTURES.parent.parent)}")


def build_corpus(root: pathlib.Path):
    data_dir = root / "data"
    spec = SyntheticSpec(image_size=32, train_per_class=10, test_per_class=5,
                         confound_rate=0.6, seed=3)
    data_mod.generate(spec, data_dir)
    (data_dir / "resolved-config").write_text(
        "artifact_size_frac=0.25\nartifact_color=230,30,30\n"
        "artifact_margin=2\n")

    config = ModelConfig(image_size=32, num_prototypes=8, num_classes=2,
                         backbone=((4, 2), (8, 2)))
    model = PrototypeClassifier.init(config, seed=5)

    train_items = data_mod.load_items(data_dir, "train")
    flagged, thresholds = [], THRESHOLD_LADDER[-1]
    for presence_thr, overlap_thr in THRESHOLD_LADDER:
        report = debug_mod.detect_shortcuts(model, train_items,
                                            presence_thr=presence_thr,
                                            overlap_thr=overlap_thr)
        if report.flagged_ids:
            flagged, thresholds = report.flagged_ids, (presence_thr,
                                                       overlap_thr)
            break
    assert flagged, "no prototype overlapped the artifact; reroll seeds"

    # weight the first flagged prototype so disabling it moves global size,
    # plus a few clean prototypes so the sheet stays non-trivial
    w = np.zeros((8, 2), dtype=np.float32)
    w[flagged[0], 1] = 1.8
    spare = [pid for pid in range(8) if pid not in flagged]
    w[spare[0], 0] = 2.0
    w[spare[1], 1] = 1.1
    w[spare[2], 0] = 0.7
    model.params["class_w"].data[:] = w

    ckpt_dir = root / "checkpoint"
    model.save(ckpt_dir)
    return ckpt_dir, data_dir, thresholds


def wait_for_job(client, job_id, timeout=30.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        body = client.get(f"/jobs/{job_id}").json()
        if body["status"] != "running":
            return body
        time.sleep(0.02)
    raise TimeoutError(job_id)


def pick_predict_image(data_dir: pathlib.Path):
    """A test image whose prediction carries at least one explanation
    entry, so the inspector fixture has rectangles to check."""
    manifest = (data_dir / "manifest").read_text().strip().splitlines()
    refs = [line.split(",")[0] for line in manifest[1:]
            if line.startswith("test/")]
    return [data_dir / ref for ref in refs]


def main() -> int:
    FIXTURES.mkdir(parents=True, exist_ok=True)
    # fixed scratch path so re-recorded fixtures diff cleanly
    root = pathlib.Path(tempfile.gettempdir()) / "protoscope-fixture-record"
    if root.exists():
        shutil.rmtree(root)
    root.mkdir(parents=True)
    try:
        ckpt_dir, data_dir, (presence_thr, overlap_thr) = build_corpus(root)
        app = build_app(ckpt_dir, data_dir)
        with TestClient(app) as client:
            # -- session start (mirrors WorkbenchSession.start) -----------
            save("session.json", client.get("/session").json())
            prototypes_before = client.get("/prototypes").json()
            save("prototypes_before.json", prototypes_before)
            baseline = client.get(
                "/metrics?subset=test&positive_class=1").json()
            save("metrics_baseline.json", baseline)

            # -- browse shortcuts and one patch grid -----------------------
            shortcuts = client.get(
                f"/shortcuts?presence_thr={presence_thr}"
                f"&overlap_thr={overlap_thr}").json()
            save("shortcuts.json", shortcuts)
            flagged = shortcuts["flagged"]
            assert flagged, "recorded shortcut report is empty"
            save("patches.json", client.get(
                f"/prototypes/{flagged[0]}/patches?k=4").json())

            # -- disable every flagged prototype ---------------------------
            acks = [client.post(f"/prototypes/{pid}/disable").json()
                    for pid in flagged]
            save("disable_acks.json", acks)
            save("prototypes_after.json", client.get("/prototypes").json())

            # -- re-evaluate through the job queue --------------------------
            ticket = client.post(
                "/evaluate", json={"subset": "test",
                                   "positive_class": 1}).json()
            save("evaluate_ticket.json", ticket)
            done = wait_for_job(client, ticket["job_id"])
            assert done["status"] == "done", done
            save("job_done.json", done)
            after = client.get("/metrics?subset=test&positive_class=1").json()
            save("metrics_after.json", after)

            # -- counterfactual panel --------------------------------------
            save("counterfactual.json", client.post(
                "/counterfactual",
                json={"target_class": 1, "presence_thr": presence_thr,
                      "overlap_thr": overlap_thr}).json())

            # -- image inspection ------------------------------------------
            prediction = None
            for path in pick_predict_image(data_dir):
                body = client.post(
                    "/predict",
                    files={"file": (path.name, path.read_bytes(),
                                    "image/png")}).json()
                if not body["abstained"] and body["explanation"]["entries"]:
                    prediction = body
                    break
            assert prediction is not None, "no test image produced entries"
            save("predict.json", prediction)

            # an abstained prediction: mute everything, ask again
            for pid in range(8):
                client.post(f"/prototypes/{pid}/disable")
            path = pick_predict_image(data_dir)[0]
            abstain = client.post(
                "/predict", files={"file": (path.name, path.read_bytes(),
                                            "image/png")}).json()
            assert abstain["abstained"], "expected an abstained prediction"
            save("predict_abstain.json", abstain)

            save("log.json", client.get("/log").json())

        save("scripted_session.json", {
            "subset": "test",
            "positive_class": 1,
            "presence_thr": presence_thr,
            "overlap_thr": overlap_thr,
            "flagged": flagged,
            "patch_k": 4,
            "image_size": 32,
        })
    finally:
        shutil.rmtree(root, ignore_errors=True)
    print("fixture recording complete")
    return 0


if __name__ == "__main__":
    sys.exit(main())
