"""Shortcut detection and human correction.

A prototype that keeps firing on top of the inserted artifact is a
shortcut: the model scores the confounded class from the sticker, not the
shape. These tools find such prototypes by intersecting each firing
location with the artifact masks, let a reviewer switch them off (and back
on) with an audit trail, and measure what the intervention did via
counterfactual artifact insertion.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .data import _CORNERS, ArtifactSpec, insert_artifact
from .model import ABSTAIN, PrototypeClassifier


# ---------------------------------------------------------------------------
# shortcut detection


@dataclass
class PrototypeShortcut:
    prototype_id: int
    activation_count: int
    overlap_count: int
    overlap_fraction: float
    flagged: bool

    def to_dict(self) -> dict:
        return {
            "prototype_id": self.prototype_id,
            "activation_count": self.activation_count,
            "overlap_count": self.overlap_count,
            "overlap_fraction": self.overlap_fraction,
            "flagged": self.flagged,
        }


@dataclass
class ShortcutReport:
    presence_thr: float
    overlap_thr: float
    rows: list

    @property
    def flagged_ids(self) -> list:
        return [r.prototype_id for r in self.rows if r.flagged]

    def to_dict(self) -> dict:
        return {
            "presence_thr": self.presence_thr,
            "overlap_thr": self.overlap_thr,
            "flagged": self.flagged_ids,
            "prototypes": [r.to_dict() for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def detect_shortcuts(model, items, presence_thr: float = 0.1,
                     overlap_thr: float = 0.2) -> ShortcutReport:
    """Flag prototypes whose firing locations keep landing on the artifact.

    For every image where a prototype's presence exceeds presence_thr, the
    rectangle of its argmax cell is intersected with the image's artifact
    mask; one or more shared pixels count as an overlap. A prototype is
    flagged when at least overlap_thr of its activations overlap. Images
    without a mask simply never overlap.
    """
    items = list(items)
    if not items:
        raise ValueError("cannot detect shortcuts on an empty dataset")
    if all(item.artifact_mask is None for item in items):
        raise ValueError(
            "no artifact masks in the dataset; generate data with a "
            "nonzero confound rate (or pass the counterfactual split)")

    images = np.stack([item.image for item in items])
    presence, locations = model.presence(images)
    num_prototypes = presence.shape[1]

    rows = []
    for pid in range(num_prototypes):
        active = np.flatnonzero(presence[:, pid] > presence_thr)
        overlaps = 0
        for i in active:
            mask = items[int(i)].artifact_mask
            if mask is None:
                continue
            top, left, bottom, right = model.patch_rectangle(
                locations[int(i), pid])
            if mask[top:bottom, left:right].any():
                overlaps += 1
        count = int(active.size)
        fraction = overlaps / count if count else 0.0
        rows.append(PrototypeShortcut(
            pid, count, overlaps, float(fraction),
            bool(count > 0 and fraction >= overlap_thr)))
    return ShortcutReport(presence_thr, overlap_thr, rows)


# ---------------------------------------------------------------------------
# intervention log


@dataclass
class LogEntry:
    timestamp: str
    prototype_id: int
    action: str
    actor: str
    metrics_before: str | None = None
    metrics_after: str | None = None

    def to_dict(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "prototype_id": self.prototype_id,
            "action": self.action,
            "actor": self.actor,
            "metrics_before": self.metrics_before,
            "metrics_after": self.metrics_after,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LogEntry":
        return cls(d["timestamp"], int(d["prototype_id"]), d["action"],
                   d["actor"], d.get("metrics_before"), d.get("metrics_after"))


class InterventionLog:
    """Append-only record of disable/enable actions.

    Backed by a JSON-lines file when a path is given; existing entries are
    loaded so a reopened log continues where it left off. Replaying the
    log over a base disabled set reproduces the current one exactly.
    """

    def __init__(self, path=None):
        self.path = os.fspath(path) if path is not None else None
        self.entries: list = []
        self._lock = threading.Lock()
        if self.path and os.path.exists(self.path):
            with open(self.path) as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        self.entries.append(LogEntry.from_dict(json.loads(line)))

    def append(self, prototype_id: int, action: str, actor: str = "user",
               metrics_before=None, metrics_after=None) -> LogEntry:
        if action not in ("disable", "enable"):
            raise ValueError(f"unknown action {action!r}")
        entry = LogEntry(datetime.now(timezone.utc).isoformat(),
                         int(prototype_id), action, actor,
                         metrics_before, metrics_after)
        with self._lock:
            self.entries.append(entry)
            if self.path:
                with open(self.path, "a") as fh:
                    fh.write(json.dumps(entry.to_dict()) + "\n")
        return entry

    def replay(self, base_disabled=()) -> set:
        """The disabled set produced by applying every entry in order."""
        disabled = set(int(i) for i in base_disabled)
        for entry in self.entries:
            if entry.action == "disable":
                disabled.add(entry.prototype_id)
            else:
                disabled.discard(entry.prototype_id)
        return disabled

    def __len__(self):
        return len(self.entries)


# ---------------------------------------------------------------------------
# interventions


def _check_ids(model, prototype_ids):
    ids = [int(i) for i in prototype_ids]
    for i in ids:
        if not 0 <= i < model.config.num_prototypes:
            raise ValueError(f"prototype {i} out of range")
    return ids


def disable(model, prototype_ids, log: InterventionLog | None = None,
            actor: str = "user", metrics_before=None, metrics_after=None):
    """Zero the effective weights of these prototypes, reversibly.

    The stored weights stay untouched, so enable() restores behaviour
    bit-for-bit. Disabling an already-disabled prototype is a no-op but is
    still logged: the log records what the reviewer did, not its effect.
    """
    for i in _check_ids(model, prototype_ids):
        model.disabled.add(i)
        if log is not None:
            log.append(i, "disable", actor, metrics_before, metrics_after)
    return model


def enable(model, prototype_ids, log: InterventionLog | None = None,
           actor: str = "user", metrics_before=None, metrics_after=None):
    for i in _check_ids(model, prototype_ids):
        model.disabled.discard(i)
        if log is not None:
            log.append(i, "enable", actor, metrics_before, metrics_after)
    return model


# ---------------------------------------------------------------------------
# counterfactual evaluation


@dataclass
class SubsetResult:
    subset: str
    n: int
    original: dict
    adapted: dict

    def to_dict(self) -> dict:
        return {"subset": self.subset, "n": self.n,
                "original": self.original, "adapted": self.adapted}


@dataclass
class CounterfactualReport:
    target_class: int
    flagged_ids: list
    rows: list

    def row(self, subset: str) -> SubsetResult:
        for r in self.rows:
            if r.subset == subset:
                return r
        raise KeyError(subset)

    def to_dict(self) -> dict:
        return {"target_class": self.target_class,
                "flagged": list(self.flagged_ids),
                "rows": [r.to_dict() for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def subset_accuracy(model, images: np.ndarray, labels) -> dict:
    """Accuracy and abstain fraction; abstentions count as wrong."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        return {"accuracy": 0.0, "abstain_fraction": 0.0}
    preds = np.array([p.label for p in model.predict_batch(images)])
    return {
        "accuracy": float((preds == labels).mean()),
        "abstain_fraction": float((preds == ABSTAIN).mean()),
    }


def _insert_into_item(image: np.ndarray, artifact: ArtifactSpec,
                      corner: str) -> np.ndarray:
    as_uint8 = np.clip(np.round(image.transpose(1, 2, 0) * 255),
                       0, 255).astype(np.uint8)
    pasted, _ = insert_artifact(as_uint8, artifact, corner)
    return (pasted.astype(np.float32) / 255.0).transpose(2, 0, 1)


def insert_into_items(items, artifact: ArtifactSpec, seed: int = 0) -> np.ndarray:
    """Stack of item images with the artifact pasted into a per-image
    deterministic corner."""
    out = []
    for i, item in enumerate(items):
        rng = np.random.default_rng([seed, i])
        corner = _CORNERS[rng.integers(len(_CORNERS))]
        out.append(_insert_into_item(item.image, artifact, corner))
    return np.stack(out) if out else np.zeros((0, 3, 1, 1), dtype=np.float32)


def counterfactual_eval(model, items, artifact: ArtifactSpec,
                        target_class: int, flagged_ids,
                        seed: int = 0) -> CounterfactualReport:
    """Measure artifact reliance before and after disabling the flagged
    prototypes.

    Four subsets, each scored by the current model ("original") and by a
    copy with the flagged prototypes additionally disabled ("adapted"):
    the dataset as given; the subset without artifacts; target-class
    images with the artifact pasted in; and every other class with the
    artifact pasted in. A shortcut model aces the third row and collapses
    on the fourth; disabling the flagged prototypes should repair the
    fourth without moving the first two.
    """
    items = list(items)
    flagged_ids = _check_ids(model, flagged_ids)
    adapted = PrototypeClassifier(
        model.config, model.params,
        disabled=set(model.disabled) | set(flagged_ids))

    full_images = np.stack([it.image for it in items])
    full_labels = [it.label for it in items]
    clean = [it for it in items if it.artifact_mask is None]
    target = [it for it in items
              if it.label == target_class and it.artifact_mask is None]
    other = [it for it in items
             if it.label != target_class and it.artifact_mask is None]

    def both(images, labels):
        return (subset_accuracy(model, images, labels),
                subset_accuracy(adapted, images, labels))

    rows = []
    orig, adap = both(full_images, full_labels)
    rows.append(SubsetResult("full", len(items), orig, adap))

    clean_images = np.stack([it.image for it in clean]) if clean else \
        np.zeros((0,) + full_images.shape[1:], dtype=np.float32)
    orig, adap = both(clean_images, [it.label for it in clean])
    rows.append(SubsetResult("excluding_artifacted", len(clean), orig, adap))

    orig, adap = both(insert_into_items(target, artifact, seed),
                      [it.label for it in target])
    rows.append(SubsetResult("target_with_artifact", len(target), orig, adap))

    orig, adap = both(insert_into_items(other, artifact, seed),
                      [it.label for it in other])
    rows.append(SubsetResult("other_with_artifact", len(other), orig, adap))

    return CounterfactualReport(int(target_class), flagged_ids, rows)


# ---------------------------------------------------------------------------
# abstention


@dataclass
class AbstentionReport:
    fraction: float
    abstained_refs: list

    def to_dict(self) -> dict:
        return {"fraction": self.fraction,
                "abstained_refs": list(self.abstained_refs)}


def abstention_report(model, items) -> AbstentionReport:
    """Which images the model refuses to score at all."""
    items = list(items)
    if not items:
        return AbstentionReport(0.0, [])
    images = np.stack([it.image for it in items])
    preds = model.predict_batch(images)
    refs = [items[i].relpath or str(i)
            for i, p in enumerate(preds) if p.abstained]
    return AbstentionReport(len(refs) / len(items), refs)
