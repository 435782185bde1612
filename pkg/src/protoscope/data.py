"""Synthetic confounded dataset: jagged blobs vs smooth discs, with an
optional colored-square artifact pasted into a controlled fraction of one
class's training images.

The two classes share color and size statistics so boundary texture is the
real cue; the artifact is a perfectly predictable shortcut. Every artifacted
image ships with an exact binary mask, and a separate counterfactual split
holds the clean class-0 test images with the artifact pasted in, so a
model's reliance on the shortcut can be measured directly.

Layout on disk:

    train/<class>/<study>_<n>.png
    test/<class>/<study>_<n>.png
    counterfactual/0/<study>_<n>.png
    masks/<same relpath as the image it masks>
    manifest                      # relpath,label,study_id,has_artifact
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw

_CORNERS = ("top-left", "top-right", "bottom-left", "bottom-right")


@dataclass
class ArtifactSpec:
    """Hard-edged colored square pasted near an image corner."""

    size_frac: float = 0.25
    color: tuple = (230, 30, 30)
    margin: int = 2

    def side(self, image_size: int) -> int:
        return int(round(self.size_frac * image_size))


@dataclass
class SyntheticSpec:
    image_size: int = 64
    train_per_class: int = 500
    test_per_class: int = 150
    images_per_study: int = 1
    confound_rate: float = 0.5
    artifact: ArtifactSpec = field(default_factory=ArtifactSpec)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.confound_rate <= 1.0:
            raise ValueError("confound_rate must lie in [0, 1]")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ValueError("need at least one image per class and split")
        if self.images_per_study < 1:
            raise ValueError("images_per_study must be positive")
        for count in (self.train_per_class, self.test_per_class):
            if count % self.images_per_study:
                raise ValueError(
                    f"count {count} not divisible by images_per_study "
                    f"{self.images_per_study}")
        side = self.artifact.side(self.image_size)
        if side > 0 and side + self.artifact.margin > self.image_size:
            raise ValueError("artifact does not fit inside the image")


@dataclass
class DatasetItem:
    """One image in memory: channels-first float in [0,1], plus its exact
    artifact mask when the image carries one."""

    image: np.ndarray
    label: int
    study_id: str
    artifact_mask: np.ndarray | None = None
    relpath: str = ""


@dataclass
class ManifestRow:
    relpath: str
    label: int
    study_id: str
    has_artifact: bool

    @property
    def split(self) -> str:
        return self.relpath.split("/", 1)[0]


@dataclass
class SplitManifest:
    train_ids: list
    test_ids: list
    seed: int
    fraction: float


# ---------------------------------------------------------------------------
# artifact insertion


def _corner_origin(corner: str, size: int, side: int, margin: int):
    if corner not in _CORNERS:
        raise ValueError(f"unknown corner {corner!r}")
    row = margin if corner.startswith("top") else size - margin - side
    col = margin if corner.endswith("left") else size - margin - side
    return row, col


def insert_artifact(image: np.ndarray, artifact: ArtifactSpec,
                    corner: str = "top-left"):
    """Paste the artifact square into an HxWx3 uint8 image.

    Returns (new image, uint8 mask) where the mask is 255 exactly on the
    replaced pixels; every pixel outside the mask is byte-identical to the
    input. A zero-size artifact returns the image unchanged.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError("expected an HxWx3 uint8 image")
    size = image.shape[0]
    side = artifact.side(size)
    mask = np.zeros(image.shape[:2], dtype=np.uint8)
    out = image.copy()
    if side == 0:
        return out, mask
    row, col = _corner_origin(corner, size, side, artifact.margin)
    if row < 0 or col < 0 or row + side > size or col + side > size:
        raise ValueError("artifact placement falls outside the image")
    out[row:row + side, col:col + side] = np.array(artifact.color, dtype=np.uint8)
    mask[row:row + side, col:col + side] = 255
    return out, mask


# ---------------------------------------------------------------------------
# shape rendering

# Shared color statistics: texture, not color or size, separates the classes.
_SHAPE_BASE = np.array([152.0, 126.0, 104.0])
_NOISE_MEAN, _NOISE_STD = 85.0, 18.0


def _background(size: int, rng) -> np.ndarray:
    noise = rng.normal(_NOISE_MEAN, _NOISE_STD, size=(size, size, 3))
    return np.clip(noise, 0, 255).astype(np.uint8)


def _study_params(label: int, rng) -> dict:
    color = np.clip(_SHAPE_BASE + rng.normal(0, 16, size=3), 0, 255)
    base_r = 0.23 * (1.0 + rng.uniform(-0.07, 0.07))
    if label == 0:
        # jagged perimeter: a centered random walk plus per-vertex spikes
        k = 40
        walk = np.cumsum(rng.normal(0, 1, size=k))
        walk = walk - walk.mean()
        walk = walk / (np.abs(walk).max() + 1e-9)
        spikes = rng.uniform(0.72, 1.28, size=k)
        profile = np.clip(1.0 + 0.38 * walk, 0.45, 1.6) * spikes
    else:
        # gentle low-frequency radius modulation
        k = 96
        theta = np.linspace(0, 2 * np.pi, k, endpoint=False)
        profile = (1.0
                   + 0.05 * np.sin(2 * theta + rng.uniform(0, 2 * np.pi))
                   + 0.03 * np.sin(3 * theta + rng.uniform(0, 2 * np.pi)))
    return {"color": color, "base_r": base_r, "profile": profile}


def _render(label: int, params: dict, size: int, rng) -> np.ndarray:
    canvas = _background(size, rng)
    profile = np.roll(params["profile"], rng.integers(len(params["profile"])))
    radius = params["base_r"] * size * profile * (1.0 + rng.uniform(-0.03, 0.03))
    k = len(profile)
    theta = np.linspace(0, 2 * np.pi, k, endpoint=False) + rng.uniform(0, 2 * np.pi)
    cy = size / 2 + rng.uniform(-3, 3)
    cx = size / 2 + rng.uniform(-3, 3)
    color = tuple(int(c) for c in np.clip(
        params["color"] + rng.normal(0, 5, size=3), 0, 255))

    # class 1 is drawn supersampled then shrunk for a smooth anti-aliased
    # edge; class 0 is drawn at native resolution so its boundary stays hard
    scale = 1 if label == 0 else 4
    xs = (cx + radius * np.cos(theta)) * scale
    ys = (cy + radius * np.sin(theta)) * scale
    points = list(zip(xs.tolist(), ys.tolist()))

    img = Image.fromarray(canvas).resize((size * scale, size * scale),
                                         Image.NEAREST)
    ImageDraw.Draw(img).polygon(points, fill=color)
    if scale != 1:
        img = img.resize((size, size), Image.LANCZOS)
    return np.asarray(img, dtype=np.uint8)


# ---------------------------------------------------------------------------
# generation


def _image_rng(seed: int, index: int):
    return np.random.default_rng([seed, index])


def _save_png(path: str, array: np.ndarray, mode=None) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    Image.fromarray(array, mode=mode).save(path)


def generate(spec: SyntheticSpec, out_dir) -> str:
    """Write the full dataset and return the manifest path.

    Exactly round(confound_rate * class-1 train count) training images of
    class 1 receive the artifact; class 0 and the clean test split never
    do. The counterfactual split repeats every class-0 test image with the
    artifact pasted in. Bit-identical across runs for a fixed spec.
    """
    out_dir = os.fspath(out_dir)
    rows = []
    index = 0          # per-image stream id
    study_index = 0    # per-study stream id, offset away from image ids

    n_confound = int(round(spec.confound_rate * spec.train_per_class))
    pick_rng = np.random.default_rng([spec.seed, 999_999_999])
    confounded = set(pick_rng.choice(spec.train_per_class, size=n_confound,
                                     replace=False).tolist()) if n_confound else set()

    for split, per_class in (("train", spec.train_per_class),
                             ("test", spec.test_per_class)):
        for label in (0, 1):
            n_studies = per_class // spec.images_per_study
            class1_counter = 0
            for s in range(n_studies):
                study_id = f"{split[:2]}{label}-{s:04d}"
                params = _study_params(
                    label, _image_rng(spec.seed, 500_000_000 + study_index))
                study_index += 1
                for n in range(spec.images_per_study):
                    rng = _image_rng(spec.seed, index)
                    index += 1
                    image = _render(label, params, spec.image_size, rng)
                    relpath = f"{split}/{label}/{study_id}_{n}.png"

                    put_artifact = (split == "train" and label == 1
                                    and class1_counter in confounded)
                    if label == 1:
                        class1_counter += 1
                    if put_artifact:
                        corner = _CORNERS[rng.integers(len(_CORNERS))]
                        image, mask = insert_artifact(image, spec.artifact, corner)
                        _save_png(os.path.join(out_dir, "masks", relpath), mask, "L")
                    _save_png(os.path.join(out_dir, relpath), image)
                    rows.append(ManifestRow(relpath, label, study_id, put_artifact))

                    # clean class-0 test images get an artifacted twin
                    if split == "test" and label == 0:
                        corner = _CORNERS[rng.integers(len(_CORNERS))]
                        twin, mask = insert_artifact(image, spec.artifact, corner)
                        twin_rel = f"counterfactual/{label}/{study_id}_{n}.png"
                        _save_png(os.path.join(out_dir, twin_rel), twin)
                        _save_png(os.path.join(out_dir, "masks", twin_rel), mask, "L")
                        rows.append(ManifestRow(twin_rel, label, study_id, True))

    manifest_path = os.path.join(out_dir, "manifest")
    with open(manifest_path, "w") as fh:
        for row in rows:
            fh.write(f"{row.relpath},{row.label},{row.study_id},"
                     f"{int(row.has_artifact)}\n")
    return manifest_path


# ---------------------------------------------------------------------------
# loading


def load_manifest(root) -> list[ManifestRow]:
    root = os.fspath(root)
    path = os.path.join(root, "manifest")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest under {root}")
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            relpath, label, study_id, has_artifact = line.split(",")
            rows.append(ManifestRow(relpath, int(label), study_id,
                                    bool(int(has_artifact))))
    return rows


def _read_image(path: str) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_mask(root, relpath: str) -> np.ndarray | None:
    path = os.path.join(os.fspath(root), "masks", relpath)
    if not os.path.exists(path):
        return None
    with Image.open(path) as img:
        return np.asarray(img.convert("L")) >= 128


def load_items(root, split: str) -> list[DatasetItem]:
    """Load one split ("train", "test", "counterfactual") into memory."""
    root = os.fspath(root)
    items = []
    for row in load_manifest(root):
        if row.split != split:
            continue
        image = _read_image(os.path.join(root, row.relpath))
        mask = load_mask(root, row.relpath) if row.has_artifact else None
        items.append(DatasetItem(image, row.label, row.study_id, mask,
                                 row.relpath))
    if not items:
        raise ValueError(f"split {split!r} is empty or unknown")
    return items


def stack_images(items) -> np.ndarray:
    return np.stack([item.image for item in items], axis=0)


def labels_of(items) -> np.ndarray:
    return np.array([item.label for item in items], dtype=np.int64)


# ---------------------------------------------------------------------------
# splitting


def split_by_study(items, fraction: float, seed: int = 0) -> SplitManifest:
    """Partition studies (never individual images) into train/test id lists.

    `fraction` is the share of studies that lands in train.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie strictly between 0 and 1")
    ids = []
    seen = set()
    for item in items:
        sid = item.study_id
        if sid not in seen:
            seen.add(sid)
            ids.append(sid)
    if len(ids) < 2:
        raise ValueError("need at least 2 studies to split")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(fraction * len(ids)))
    n_train = min(max(n_train, 1), len(ids) - 1)
    train_ids = sorted(ids[i] for i in order[:n_train])
    test_ids = sorted(ids[i] for i in order[n_train:])
    return SplitManifest(train_ids, test_ids, seed, fraction)
