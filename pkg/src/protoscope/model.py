"""Part-prototype classifier.

A small convolutional backbone maps an image to a grid of prototype
activations z (channel softmax, so each grid cell distributes one unit of
evidence across prototypes). Spatial max pooling turns the grid into a
presence vector p, and a non-negative sparse weight matrix W turns presence
into unnormalized class scores:

    scores[c] = sum_i p[i] * W_eff[i, c]

The model abstains when no class collects any evidence. Every prediction is
therefore a readable scoring sheet: which prototypes fired, where, and how
much weight each contributes to each class.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

# Sentinel label for "no class scored above the noise floor".
ABSTAIN = -1

# Fixed input standardization applied after scaling pixels to [0, 1].
_PIXEL_MEAN = 0.5
_PIXEL_STD = 0.25


@dataclass
class ModelConfig:
    """Architecture and inference thresholds.

    backbone lists (out_channels, stride) per 3x3 conv stage; every stage
    uses padding 1 and is followed by instance normalization and a relu.
    A 1x1 conv then maps the last stage's channels to num_prototypes and a
    channel softmax produces the prototype grid.
    """

    image_size: int = 64
    num_prototypes: int = 64
    num_classes: int = 2
    backbone: tuple = ((16, 2), (32, 2), (64, 2), (128, 1))
    patch_scale: float = 2.0
    relevance_epsilon: float = 1e-3
    abstain_epsilon: float = 1e-6

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.image_size < 8:
            raise ValueError("image_size too small for the backbone")
        self.backbone = tuple((int(c), int(s)) for c, s in self.backbone)

    @property
    def feature_dim(self) -> int:
        return self.backbone[-1][0]

    @property
    def grid_size(self) -> tuple[int, int]:
        # 3x3 / padding-1 stages: spatial size folds as (n - 1) // stride + 1
        n = self.image_size
        for _, stride in self.backbone:
            n = (n - 1) // stride + 1
        return (n, n)

    def to_lines(self) -> list[str]:
        stages = ",".join(f"{c}:{s}" for c, s in self.backbone)
        return [
            f"image_size={self.image_size}",
            f"num_prototypes={self.num_prototypes}",
            f"num_classes={self.num_classes}",
            f"backbone={stages}",
            f"patch_scale={self.patch_scale}",
            f"relevance_epsilon={self.relevance_epsilon}",
            f"abstain_epsilon={self.abstain_epsilon}",
        ]

    @classmethod
    def from_lines(cls, lines) -> "ModelConfig":
        kv = {}
        for line in lines:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        backbone = tuple(
            tuple(int(p) for p in stage.split(":"))
            for stage in kv.pop("backbone").split(",")
        )
        return cls(
            image_size=int(kv.pop("image_size")),
            num_prototypes=int(kv.pop("num_prototypes")),
            num_classes=int(kv.pop("num_classes")),
            backbone=backbone,
            patch_scale=float(kv.pop("patch_scale", 2.0)),
            relevance_epsilon=float(kv.pop("relevance_epsilon", 1e-3)),
            abstain_epsilon=float(kv.pop("abstain_epsilon", 1e-6)),
        )


@dataclass
class PresenceVector:
    """Per-prototype spatial max and where it was found.

    locations holds (row, col) grid coordinates per prototype; for study
    pooling, image_indices records which image each max came from.
    """

    p: np.ndarray
    locations: np.ndarray
    image_indices: np.ndarray | None = None


@dataclass
class Prediction:
    scores: np.ndarray
    label: int
    presence: PresenceVector

    @property
    def abstained(self) -> bool:
        return self.label == ABSTAIN


@dataclass
class ScoringSheet:
    """Non-negative prototype-to-class weights with a disable switch.

    Disabling a prototype zeroes its row in the effective weights without
    touching the stored values, so a disable can be undone exactly. Entries
    below relevance_epsilon are training dust and count as zero everywhere.
    """

    weights: np.ndarray
    disabled: set = field(default_factory=set)
    relevance_epsilon: float = 1e-3

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float32)
        if self.weights.ndim != 2:
            raise ValueError("weights must be a P x C matrix")
        if (self.weights < 0).any():
            raise ValueError("scoring-sheet weights must be non-negative")
        self.disabled = set(int(i) for i in self.disabled)

    def effective(self) -> np.ndarray:
        w = self.weights.copy()
        w[w < self.relevance_epsilon] = 0.0
        for i in self.disabled:
            w[i, :] = 0.0
        return w


class PrototypeClassifier:
    """encode -> pool -> score pipeline plus checkpointing.

    Parameters live in a name -> Tensor dict so the trainer and the
    checkpoint format can address them uniformly. The class-weight matrix
    is a parameter like any other, but reads go through the ScoringSheet
    so disabled prototypes stay silent.
    """

    def __init__(self, config: ModelConfig, params: dict, disabled=()):
        self.config = config
        self.params = params
        self.disabled = set(int(i) for i in disabled)

    # ------------------------------------------------------------------
    # construction

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "PrototypeClassifier":
        """He-initialized backbone, zero class weights (so the untrained
        model abstains on everything)."""
        rng = np.random.default_rng(seed)
        params = {}
        in_ch = 3
        for k, (out_ch, _) in enumerate(config.backbone):
            fan_in = in_ch * 9
            params[f"stage{k}_w"] = ad.Tensor(
                rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, 3, 3)),
                requires_grad=True)
            params[f"stage{k}_gamma"] = ad.Tensor(np.ones(out_ch), requires_grad=True)
            params[f"stage{k}_beta"] = ad.Tensor(np.zeros(out_ch), requires_grad=True)
            in_ch = out_ch
        params["proto_w"] = ad.Tensor(
            rng.normal(0.0, np.sqrt(2.0 / in_ch),
                       size=(config.num_prototypes, in_ch, 1, 1)),
            requires_grad=True)
        params["class_w"] = ad.Tensor(
            np.zeros((config.num_prototypes, config.num_classes)),
            requires_grad=True)
        return cls(config, params)

    @property
    def sheet(self) -> ScoringSheet:
        return ScoringSheet(
            np.maximum(self.params["class_w"].data, 0.0),
            disabled=self.disabled,
            relevance_epsilon=self.config.relevance_epsilon)

    def backbone_parameters(self) -> list:
        return [t for name, t in self.params.items() if name != "class_w"]

    # ------------------------------------------------------------------
    # forward

    def forward_grid(self, x: ad.Tensor) -> ad.Tensor:
        """Differentiable path: batch tensor (N,3,S,S) -> grid (N,P,H,W)."""
        h = x
        for k, (_, stride) in enumerate(self.config.backbone):
            h = ad.conv2d(h, self.params[f"stage{k}_w"], stride=stride, padding=1)
            h = ad.instance_norm(h, self.params[f"stage{k}_gamma"],
                                 self.params[f"stage{k}_beta"])
            h = ad.relu(h)
        logits = ad.conv2d(h, self.params["proto_w"], stride=1, padding=0)
        return ad.softmax_channel(logits)

    def _standardize(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images)
        given_shape = images.shape
        if images.dtype == np.uint8:
            images = images.astype(np.float32) / 255.0
        single = images.ndim == 3
        if single:
            images = images[None]
        s = self.config.image_size
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (s, s):
            raise ValueError(
                f"expected images shaped (N,3,{s},{s}) or (3,{s},{s}), "
                f"got {given_shape}")
        x = (images.astype(np.float32) - _PIXEL_MEAN) / _PIXEL_STD
        return x, single

    def encode(self, images: np.ndarray) -> np.ndarray:
        """Images in [0,1] (or uint8) -> prototype grid(s), no gradients."""
        x, single = self._standardize(images)
        z = self.forward_grid(ad.Tensor(x)).data
        return z[0] if single else z

    def presence(self, images: np.ndarray, batch_size: int = 64):
        """Presence matrix (N,P) and argmax locations (N,P,2) for a stack
        of images, computed in batches."""
        x, single = self._standardize(images)
        ps, locs = [], []
        for start in range(0, len(x), batch_size):
            z = self.forward_grid(ad.Tensor(x[start:start + batch_size]))
            values, where = ad.spatial_max_pool(z)
            ps.append(values.data)
            locs.append(where)
        p = np.concatenate(ps, axis=0)
        where = np.concatenate(locs, axis=0)
        return (p[0], where[0]) if single else (p, where)

    # ------------------------------------------------------------------
    # scoring

    @staticmethod
    def pool_presence(z: np.ndarray) -> PresenceVector:
        """Spatial max per prototype channel of one grid (P,H,W)."""
        z = np.asarray(z, dtype=np.float32)
        P, H, W = z.shape
        flat = z.reshape(P, -1)
        idx = flat.argmax(axis=1)
        locs = np.stack([idx // W, idx % W], axis=1).astype(np.int64)
        return PresenceVector(flat[np.arange(P), idx], locs)

    def classify(self, presence: PresenceVector) -> Prediction:
        w_eff = self.sheet.effective().astype(np.float64)
        scores = presence.p.astype(np.float64) @ w_eff
        if (scores < self.config.abstain_epsilon).all():
            label = ABSTAIN
        else:
            label = int(scores.argmax())  # argmax takes the lowest id on ties
        return Prediction(scores, label, presence)

    def predict(self, image: np.ndarray) -> Prediction:
        p, locs = self.presence(image)
        return self.classify(PresenceVector(p, locs))

    def predict_batch(self, images: np.ndarray, batch_size: int = 64) -> list:
        p, locs = self.presence(images, batch_size=batch_size)
        return [self.classify(PresenceVector(p[i], locs[i])) for i in range(len(p))]

    def predict_study(self, images) -> Prediction:
        """Pool presence over every image of a study, then classify once.

        Elementwise max over per-image presence vectors equals pooling the
        stacked grids, since max commutes with max.
        """
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        if len(images) == 0:
            raise ValueError("a study needs at least one image")
        p, locs = self.presence(images)
        winner = p.argmax(axis=0)
        P = p.shape[1]
        pooled = PresenceVector(
            p[winner, np.arange(P)],
            locs[winner, np.arange(P)],
            image_indices=winner.astype(np.int64))
        return self.classify(pooled)

    # ------------------------------------------------------------------
    # geometry

    def patch_rectangle(self, location) -> tuple[int, int, int, int]:
        """Grid cell (row, col) -> image rectangle (top, left, bottom, right).

        The cell anchors at its stride offset and the rectangle spans
        patch_scale cells, clipped to the image.
        """
        gh, gw = self.config.grid_size
        row, col = int(location[0]), int(location[1])
        if not (0 <= row < gh and 0 <= col < gw):
            raise ValueError(f"grid location {location} outside {gh}x{gw}")
        size = self.config.image_size
        s = size / gh
        r = s * self.config.patch_scale
        top = int(round(row * s))
        left = int(round(col * s))
        bottom = min(size, int(round(row * s + r)))
        right = min(size, int(round(col * s + r)))
        return (top, left, bottom, right)

    # ------------------------------------------------------------------
    # persistence

    def save(self, directory) -> None:
        directory = os.fspath(directory)
        os.makedirs(os.path.join(directory, "weights"), exist_ok=True)
        with open(os.path.join(directory, "config"), "w") as fh:
            fh.write("\n".join(self.config.to_lines()) + "\n")
        for name, tensor in self.params.items():
            ad.save_tensor(os.path.join(directory, "weights", name + ".ptns"), tensor)
        with open(os.path.join(directory, "disabled"), "w") as fh:
            for i in sorted(self.disabled):
                fh.write(f"{i}\n")

    @classmethod
    def load(cls, directory) -> "PrototypeClassifier":
        directory = os.fspath(directory)
        with open(os.path.join(directory, "config")) as fh:
            config = ModelConfig.from_lines(fh)
        model = cls.init(config)
        for name in model.params:
            path = os.path.join(directory, "weights", name + ".ptns")
            loaded = ad.load_tensor(path)
            if loaded.shape != model.params[name].shape:
                raise ValueError(
                    f"checkpoint weight {name} has shape {loaded.shape}, "
                    f"config implies {model.params[name].shape}")
            model.params[name] = ad.Tensor(loaded.data, requires_grad=True)
        disabled_path = os.path.join(directory, "disabled")
        if os.path.exists(disabled_path):
            with open(disabled_path) as fh:
                model.disabled = {int(line) for line in fh if line.strip()}
        return model
