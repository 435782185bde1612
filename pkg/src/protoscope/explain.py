"""Explanations and metrics.

Because the classifier is a linear read-out of prototype presence, every
prediction decomposes exactly into per-prototype contributions; these
functions surface that decomposition (per image and globally) and compute
the evaluation metrics, including the sparsity and explanation-size
numbers that describe how compact the model's reasoning is.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .model import PresenceVector

# presence threshold for "this prototype was found in the image"
FOUND_THRESHOLD = 0.1


@dataclass
class Patch:
    image_index: int
    image_ref: str
    rectangle: tuple
    score: float

    def to_dict(self) -> dict:
        return {"image_index": self.image_index, "image_ref": self.image_ref,
                "rectangle": list(self.rectangle), "score": self.score}


@dataclass
class PrototypeCard:
    prototype_id: int
    class_weights: np.ndarray
    patches: list = field(default_factory=list)
    status: str = "active"

    def to_dict(self) -> dict:
        return {
            "prototype_id": self.prototype_id,
            "class_weights": [float(w) for w in self.class_weights],
            "patches": [p.to_dict() for p in self.patches],
            "status": self.status,
        }


@dataclass
class ExplanationEntry:
    prototype_id: int
    presence: float
    location: tuple
    rectangle: tuple
    contributions: np.ndarray

    def to_dict(self) -> dict:
        return {
            "prototype_id": self.prototype_id,
            "presence": self.presence,
            "location": list(self.location),
            "rectangle": list(self.rectangle),
            "contributions": [float(c) for c in self.contributions],
        }


@dataclass
class Explanation:
    scores: np.ndarray
    label: int
    abstained: bool
    entries: list

    def to_dict(self) -> dict:
        return {
            "scores": [float(s) for s in self.scores],
            "label": self.label,
            "abstained": self.abstained,
            "entries": [e.to_dict() for e in self.entries],
        }


@dataclass
class MetricsReport:
    accuracy: float
    f1: float
    sensitivity: float
    specificity: float
    sparsity: float
    global_size: int
    mean_local_size: float
    abstain_fraction: float

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "f1": self.f1,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "sparsity": self.sparsity,
            "global_size": self.global_size,
            "mean_local_size": self.mean_local_size,
            "abstain_fraction": self.abstain_fraction,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


# ---------------------------------------------------------------------------
# helpers


def _as_image_stack(dataset):
    """Accepts a stack (N,3,S,S) or a list of DatasetItems; returns
    (images, refs)."""
    if isinstance(dataset, np.ndarray):
        if dataset.ndim != 4:
            raise ValueError("expected a stack of images (N,3,S,S)")
        return dataset, [str(i) for i in range(len(dataset))]
    items = list(dataset)
    if items and hasattr(items[0], "image"):
        images = np.stack([item.image for item in items])
        refs = [item.relpath or str(i) for i, item in enumerate(items)]
        return images, refs
    images = np.stack(items)
    return images, [str(i) for i in range(len(images))]


# ---------------------------------------------------------------------------
# prototype cards


def top_patches(model, dataset, prototype_id: int, k: int = 10) -> PrototypeCard:
    """The k images where this prototype fires hardest, each with the
    image rectangle its argmax cell maps to. Prototypes with zero class
    weight are included: pretrained-but-unused prototypes still show what
    they respond to."""
    if not 0 <= prototype_id < model.config.num_prototypes:
        raise ValueError(f"prototype {prototype_id} out of range")
    images, refs = _as_image_stack(dataset)
    if len(images) == 0:
        raise ValueError("cannot rank patches over an empty dataset")
    presence, locations = model.presence(images)
    order = np.argsort(-presence[:, prototype_id], kind="stable")[:k]
    patches = [
        Patch(int(i), refs[int(i)],
              model.patch_rectangle(locations[int(i), prototype_id]),
              float(presence[int(i), prototype_id]))
        for i in order
    ]
    status = "disabled" if prototype_id in model.disabled else "active"
    return PrototypeCard(prototype_id, model.sheet.effective()[prototype_id],
                         patches, status)


def global_explanation(model) -> list[PrototypeCard]:
    """One card stub per relevant prototype (any effective nonzero weight),
    ordered by the largest single class weight, descending."""
    w_eff = model.sheet.effective()
    relevant = np.flatnonzero((w_eff > 0).any(axis=1))
    order = sorted(relevant, key=lambda i: -w_eff[i].max())
    return [
        PrototypeCard(int(i), w_eff[int(i)],
                      status="disabled" if int(i) in model.disabled else "active")
        for i in order
    ]


def global_size(model) -> int:
    return int((model.sheet.effective() > 0).any(axis=1).sum())


# ---------------------------------------------------------------------------
# local explanations


def _entries_for(model, presence_row, locations_row, w_eff):
    entries = []
    for i in np.flatnonzero(presence_row > FOUND_THRESHOLD):
        row = w_eff[i]
        if not (row > 0).any():
            continue
        location = (int(locations_row[i][0]), int(locations_row[i][1]))
        entries.append(ExplanationEntry(
            int(i), float(presence_row[i]), location,
            model.patch_rectangle(location),
            presence_row[i].astype(np.float64) * row.astype(np.float64)))
    return entries


def local_explanation(model, image: np.ndarray) -> Explanation:
    """Every prototype found in the image (p > 0.1) that is relevant to
    any class, with its patch rectangle and exact per-class contribution.
    The listed contributions plus the omitted ones reproduce the scores."""
    presence, locations = model.presence(image)
    prediction = model.classify(PresenceVector(presence, locations))
    entries = _entries_for(model, presence, locations, model.sheet.effective())
    return Explanation(prediction.scores, prediction.label,
                       prediction.abstained, entries)


def local_size(model, presence_matrix: np.ndarray) -> np.ndarray:
    """Per-image count of found-and-relevant prototypes."""
    w_eff = model.sheet.effective()
    relevant = (w_eff > 0).any(axis=1)
    return ((presence_matrix > FOUND_THRESHOLD) & relevant[None, :]).sum(axis=1)


# ---------------------------------------------------------------------------
# metrics


def confusion_rates(preds: np.ndarray, labels: np.ndarray,
                    positive_class: int) -> dict:
    """Confusion-matrix rates treating the given class as positive.
    Abstentions (label -1 in preds) can never equal the positive class, so
    they act as negative predictions here."""
    pred_pos = preds == positive_class
    label_pos = labels == positive_class
    tp = int((pred_pos & label_pos).sum())
    fp = int((pred_pos & ~label_pos).sum())
    fn = int((~pred_pos & label_pos).sum())
    tn = int((~pred_pos & ~label_pos).sum())

    def rate(num, den):
        return num / den if den else 0.0

    return {
        "tp": tp, "fp": fp, "fn": fn, "tn": tn,
        "sensitivity": rate(tp, tp + fn),
        "specificity": rate(tn, tn + fp),
        "f1": rate(2 * tp, 2 * tp + fp + fn),
    }


def compute_metrics(model, dataset, labels=None, positive_class: int = 1,
                    batch_size: int = 64, precomputed=None) -> MetricsReport:
    """Evaluate the model on a labeled dataset.

    Abstentions count as wrong for accuracy and F1, enter sensitivity and
    specificity as negative predictions, and are reported separately as
    abstain_fraction. For binary tasks F1 is the positive class's; with
    more classes it is the macro average.

    precomputed, when given, is a (presence, locations) pair for the
    dataset; the backbone pass is skipped. Presence depends only on the
    backbone, so a cached pair stays valid across scoring-sheet edits.
    """
    if labels is None:
        if not (hasattr(dataset, "__iter__") and not isinstance(dataset, np.ndarray)):
            raise ValueError("labels required when dataset is a bare stack")
        labels = [item.label for item in dataset]
    labels = np.asarray(labels, dtype=np.int64)

    if precomputed is not None:
        presence, locations = precomputed
    else:
        images, _ = _as_image_stack(dataset)
        presence, locations = model.presence(images, batch_size=batch_size)
    if len(presence) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if len(presence) != len(labels):
        raise ValueError("presence and labels disagree on dataset size")
    preds = np.array([
        model.classify(PresenceVector(presence[i], locations[i])).label
        for i in range(len(presence))
    ], dtype=np.int64)

    accuracy = float((preds == labels).mean())
    abstain_fraction = float((preds == -1).mean())
    rates = confusion_rates(preds, labels, positive_class)
    classes = np.unique(labels)
    if classes.size > 2:
        f1 = float(np.mean([confusion_rates(preds, labels, int(c))["f1"]
                            for c in classes]))
    else:
        f1 = rates["f1"]

    w_eff = model.sheet.effective()
    return MetricsReport(
        accuracy=accuracy,
        f1=float(f1),
        sensitivity=float(rates["sensitivity"]),
        specificity=float(rates["specificity"]),
        sparsity=float((w_eff == 0).mean()),
        global_size=global_size(model),
        mean_local_size=float(local_size(model, presence).mean()),
        abstain_fraction=abstain_fraction,
    )


# ---------------------------------------------------------------------------
# export


def crop_to_png(image: np.ndarray, rectangle, path: str) -> None:
    top, left, bottom, right = rectangle
    crop = image[:, top:bottom, left:right]
    arr = np.clip(np.round(crop.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def export_prototype_patches(model, dataset, prototype_id: int, out_dir,
                             k: int = 10) -> str:
    """Write the top-k patch crops as PNGs plus an index JSON; returns the
    index path."""
    images, _ = _as_image_stack(dataset)
    card = top_patches(model, dataset, prototype_id, k=k)
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    index = []
    for rank, patch in enumerate(card.patches):
        name = f"proto{prototype_id:03d}_rank{rank:02d}.png"
        crop_to_png(images[patch.image_index], patch.rectangle,
                    os.path.join(out_dir, name))
        entry = patch.to_dict()
        entry["file"] = name
        index.append(entry)
    index_path = os.path.join(out_dir, f"proto{prototype_id:03d}_index.json")
    with open(index_path, "w") as fh:
        json.dump({"prototype_id": prototype_id, "status": card.status,
                   "class_weights": [float(w) for w in card.class_weights],
                   "patches": index}, fh, indent=2)
    return index_path
