"""Workbench HTTP service.

One model, one dataset, one reviewer session. Reads are cheap and
concurrent: presence matrices are computed once per subset and reused for
every metrics request, since disabling a prototype changes the scoring
sheet but never the backbone. Mutations (disable/enable) serialize through
a lock, bump the model version, and append to the intervention log; metric
caches are keyed by version so stale entries can never be served. Full
evaluations run as background jobs over a frozen snapshot of the scoring
sheet, so a slow evaluation never blocks the browser.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from fastapi import FastAPI, HTTPException, Query, UploadFile
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from PIL import Image
from pydantic import BaseModel

from . import data as data_mod
from . import debug as debug_mod
from . import explain as explain_mod
from .debug import InterventionLog
from .model import PrototypeClassifier

_SUBSETS = ("train", "test", "counterfactual")


class SessionState:
    """Everything the endpoints share.

    Presence caches are version-independent (backbone is frozen while
    serving); metrics caches are keyed (version, subset, positive_class).
    """

    def __init__(self, checkpoint, dataset):
        self.checkpoint_ref = os.fspath(checkpoint)
        self.dataset_ref = os.fspath(dataset)
        if not os.path.exists(os.path.join(self.checkpoint_ref, "config")):
            raise ValueError(
                f"cannot serve: no checkpoint at {self.checkpoint_ref!r}")
        if not os.path.exists(os.path.join(self.dataset_ref, "manifest")):
            raise ValueError(
                f"cannot serve: no dataset manifest at {self.dataset_ref!r}")
        self.model = PrototypeClassifier.load(self.checkpoint_ref)
        self.items = {}
        for subset in _SUBSETS:
            try:
                self.items[subset] = data_mod.load_items(self.dataset_ref,
                                                         subset)
            except ValueError:
                pass  # a dataset may lack e.g. the counterfactual split
        if "train" not in self.items or "test" not in self.items:
            raise ValueError(
                f"dataset at {self.dataset_ref!r} must provide train and "
                "test splits")
        self.artifact = self._artifact_from_dataset()

        self.version = 0
        log_path = os.path.join(self.checkpoint_ref, "intervention_log.jsonl")
        self.log = InterventionLog()
        if os.path.exists(log_path):
            self.log.entries = InterventionLog(log_path).entries

        self.assets_dir = tempfile.mkdtemp(prefix="protoscope-assets-")
        self._mutate_lock = threading.Lock()
        self._presence_lock = threading.Lock()
        self._presence: dict = {}
        self._metrics: dict = {}
        self._patch_cards: dict = {}
        self._jobs: dict = {}
        self._pending: dict = {}
        self._jobs_lock = threading.Lock()
        self._executor = ThreadPoolExecutor(max_workers=2)

    def _artifact_from_dataset(self):
        resolved = os.path.join(self.dataset_ref, "resolved-config")
        kv = {}
        if os.path.exists(resolved):
            with open(resolved) as fh:
                for line in fh:
                    key, _, value = line.strip().partition("=")
                    kv[key] = value
        color = tuple(int(c) for c in
                      kv.get("artifact_color", "230,30,30").split(","))
        return data_mod.ArtifactSpec(
            float(kv.get("artifact_size_frac", 0.25)), color,
            int(kv.get("artifact_margin", 2)))

    # -- presence ---------------------------------------------------------

    def presence_for(self, subset: str):
        with self._presence_lock:
            if subset not in self._presence:
                images = data_mod.stack_images(self.items[subset])
                self._presence[subset] = self.model.presence(images)
            return self._presence[subset]

    # -- metrics ----------------------------------------------------------

    def metrics_for(self, subset: str, positive_class: int = 1) -> dict:
        key = (self.version, subset, positive_class)
        if key not in self._metrics:
            items = self.items[subset]
            report = explain_mod.compute_metrics(
                self.model, items, positive_class=positive_class,
                precomputed=self.presence_for(subset))
            self._metrics[key] = report.to_dict()
        return self._metrics[key]

    # -- mutations --------------------------------------------------------

    def set_enabled(self, prototype_id: int, enabled: bool) -> dict:
        with self._mutate_lock:
            if enabled:
                debug_mod.enable(self.model, [prototype_id], self.log,
                                 actor="workbench")
            else:
                debug_mod.disable(self.model, [prototype_id], self.log,
                                  actor="workbench")
            self.version += 1
            return {"version": self.version,
                    "prototype_id": prototype_id,
                    "status": "active" if enabled else "disabled",
                    "disabled": sorted(self.model.disabled)}

    # -- jobs -------------------------------------------------------------

    def submit_evaluation(self, subset: str, positive_class: int) -> dict:
        with self._jobs_lock:
            pending = self._pending.get(subset)
            if pending and self._jobs[pending]["status"] == "running":
                raise HTTPException(
                    409, f"evaluation already running for {subset!r} "
                         f"(job {pending})")
            job_id = uuid.uuid4().hex[:12]
            snapshot = PrototypeClassifier(
                self.model.config, self.model.params,
                disabled=set(self.model.disabled))
            job = {"id": job_id, "subset": subset, "status": "running",
                   "version": self.version, "result": None, "error": None}
            self._jobs[job_id] = job
            self._pending[subset] = job_id

        def work():
            try:
                report = explain_mod.compute_metrics(
                    snapshot, self.items[subset],
                    positive_class=positive_class,
                    precomputed=self.presence_for(subset))
                job["result"] = report.to_dict()
                job["status"] = "done"
            except Exception as exc:
                job["error"] = str(exc)
                job["status"] = "failed"

        self._executor.submit(work)
        return {"job_id": job_id, "status": "running", "subset": subset}

    def job(self, job_id: str) -> dict:
        with self._jobs_lock:
            if job_id not in self._jobs:
                raise HTTPException(404, f"unknown job {job_id!r}")
            return dict(self._jobs[job_id])

    # -- prototype cards ---------------------------------------------------

    def patches_payload(self, prototype_id: int, k: int) -> dict:
        cache_key = (prototype_id, k)
        if cache_key not in self._patch_cards:
            items = self.items["train"]
            card = explain_mod.top_patches(self.model, items, prototype_id,
                                           k=k)
            images = data_mod.stack_images(items)
            patches = []
            for rank, patch in enumerate(card.patches):
                name = f"proto{prototype_id:03d}_k{k}_r{rank:02d}.png"
                explain_mod.crop_to_png(
                    images[patch.image_index], patch.rectangle,
                    os.path.join(self.assets_dir, name))
                entry = patch.to_dict()
                entry["asset"] = f"/assets/{name}"
                patches.append(entry)
            self._patch_cards[cache_key] = patches
        # status and weights are version-dependent; patches are not
        w_eff = self.model.sheet.effective()[prototype_id]
        return {
            "prototype_id": prototype_id,
            "status": ("disabled" if prototype_id in self.model.disabled
                       else "active"),
            "class_weights": [float(w) for w in w_eff],
            "patches": self._patch_cards[cache_key],
            "version": self.version,
        }


def _decode_upload(payload: bytes, image_size: int) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(payload)) as im:
            im = im.convert("RGB")
            width, height = im.size
            array = np.asarray(im, dtype=np.float32) / 255.0
    except Exception:
        raise HTTPException(422, "body is not a decodable image")
    if (height, width) != (image_size, image_size):
        raise HTTPException(
            422, f"expected a {image_size}x{image_size} image, "
                 f"got {width}x{height}")
    return array.transpose(2, 0, 1)


class EvaluateBody(BaseModel):
    subset: str
    positive_class: int = 1


class CounterfactualBody(BaseModel):
    target_class: int = 1
    presence_thr: float = 0.1
    overlap_thr: float = 0.2
    seed: int = 0


def build_app(checkpoint, dataset) -> FastAPI:
    state = SessionState(checkpoint, dataset)
    app = FastAPI(title="protoscope workbench")
    app.state.session = state
    app.mount("/assets", StaticFiles(directory=state.assets_dir),
              name="assets")

    def check_prototype(prototype_id: int):
        if not 0 <= prototype_id < state.model.config.num_prototypes:
            raise HTTPException(404,
                                f"unknown prototype {prototype_id}")

    def check_subset(subset: str):
        if subset not in state.items:
            raise HTTPException(
                422,
                f"subset must be one of {', '.join(sorted(state.items))}")

    @app.get("/prototypes")
    def list_prototypes():
        w_eff = state.model.sheet.effective()
        rows = []
        for pid in range(state.model.config.num_prototypes):
            rows.append({
                "prototype_id": pid,
                "status": ("disabled" if pid in state.model.disabled
                           else "active"),
                "class_weights": [float(w) for w in w_eff[pid]],
                "max_weight": float(w_eff[pid].max()),
            })
        return {"version": state.version, "prototypes": rows}

    @app.get("/prototypes/{prototype_id}/patches")
    def prototype_patches(prototype_id: int, k: int = Query(10, ge=1)):
        check_prototype(prototype_id)
        return state.patches_payload(prototype_id, k)

    @app.post("/prototypes/{prototype_id}/disable")
    def disable_prototype(prototype_id: int):
        check_prototype(prototype_id)
        return state.set_enabled(prototype_id, enabled=False)

    @app.post("/prototypes/{prototype_id}/enable")
    def enable_prototype(prototype_id: int):
        check_prototype(prototype_id)
        return state.set_enabled(prototype_id, enabled=True)

    @app.get("/metrics")
    def metrics(subset: str = "test", positive_class: int = 1):
        check_subset(subset)
        return {"version": state.version, "subset": subset,
                "metrics": state.metrics_for(subset, positive_class)}

    @app.post("/evaluate")
    def evaluate(body: EvaluateBody):
        check_subset(body.subset)
        return state.submit_evaluation(body.subset, body.positive_class)

    @app.get("/jobs/{job_id}")
    def job_status(job_id: str):
        return state.job(job_id)

    @app.post("/predict")
    def predict(file: UploadFile):
        payload = file.file.read()
        image = _decode_upload(payload, state.model.config.image_size)
        explanation = explain_mod.local_explanation(state.model, image)
        return {
            "version": state.version,
            "label": explanation.label,
            "abstained": explanation.abstained,
            "scores": [float(s) for s in explanation.scores],
            "explanation": explanation.to_dict(),
        }

    @app.get("/shortcuts")
    def shortcuts(presence_thr: float = 0.1, overlap_thr: float = 0.2):
        try:
            report = debug_mod.detect_shortcuts(
                state.model, state.items["train"],
                presence_thr=presence_thr, overlap_thr=overlap_thr)
        except ValueError as exc:
            raise HTTPException(422, str(exc))
        return json.loads(report.to_json())

    @app.post("/counterfactual")
    def counterfactual(body: CounterfactualBody):
        try:
            shortcut = debug_mod.detect_shortcuts(
                state.model, state.items["train"],
                presence_thr=body.presence_thr,
                overlap_thr=body.overlap_thr)
        except ValueError as exc:
            raise HTTPException(422, str(exc))
        report = debug_mod.counterfactual_eval(
            state.model, state.items["test"], state.artifact,
            body.target_class, shortcut.flagged_ids, seed=body.seed)
        payload = report.to_dict()
        payload["version"] = state.version
        return payload

    @app.get("/log")
    def intervention_log():
        return {"entries": [e.to_dict() for e in state.log.entries]}

    @app.get("/session")
    def session():
        return {
            "checkpoint": state.checkpoint_ref,
            "dataset": state.dataset_ref,
            "version": state.version,
            "num_prototypes": state.model.config.num_prototypes,
            "image_size": state.model.config.image_size,
            "disabled": sorted(state.model.disabled),
            "subsets": {s: len(items) for s, items in state.items.items()},
        }

    @app.exception_handler(ValueError)
    def value_error_handler(request, exc):
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    return app
