"""Two-stage optimization.

Stage one aligns prototype grids across augmented view pairs of unlabeled
images (pull-together agreement loss) while an anticollapse term keeps
every prototype alive somewhere in each batch. Stage two trains the
non-negative scoring sheet with a log1p-score cross entropy, fine-tunes the
backbone at a much smaller rate, and shrinks weights toward zero after
every step so the sheet ends sparse.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import autodiff as ad


@dataclass
class TrainConfig:
    lr_head: float = 0.05
    lr_backbone: float = 0.0001
    lr_pretrain: float = 0.01
    batch_size: int = 64
    pretrain_updates: int = 2000
    train_updates: int = 10000
    align_weight: float = 1.0
    anticollapse_weight: float = 1.0
    sparsity_bias: float = 0.05
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        for name in ("lr_head", "lr_backbone", "lr_pretrain"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.pretrain_updates < 0 or self.train_updates < 0:
            raise ValueError("update counts cannot be negative")
        if self.align_weight < 0 or self.anticollapse_weight < 0 \
                or self.sparsity_bias < 0:
            raise ValueError("loss coefficients cannot be negative")

    @property
    def eval_interval(self) -> int:
        return max(1, round(0.05 * self.train_updates))


@dataclass
class TrainingCurve:
    """Evaluation snapshots taken every eval interval during stage two."""

    records: list = field(default_factory=list)  # (updates, sparsity, f1, acc)

    def append(self, updates, sparsity, f1, accuracy):
        if self.records and updates <= self.records[-1][0]:
            raise ValueError("curve updates must increase")
        self.records.append((int(updates), float(sparsity), float(f1),
                             float(accuracy)))

    def save_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("updates,sparsity,f1,accuracy\n")
            for updates, sparsity, f1, accuracy in self.records:
                fh.write(f"{updates},{sparsity:.6f},{f1:.6f},{accuracy:.6f}\n")

    @classmethod
    def load_csv(cls, path) -> "TrainingCurve":
        curve = cls()
        with open(path) as fh:
            next(fh)
            for line in fh:
                updates, sparsity, f1, accuracy = line.strip().split(",")
                curve.append(int(updates), float(sparsity), float(f1),
                             float(accuracy))
        return curve


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentPolicy:
    """Which view transforms are in play and how often.

    The horizontal flip is drawn as a relative transform of view b, so an
    aligned pair differs by at most a column reversal on the grid; rotation
    and crop-resize move content off the grid lattice, which marks the pair
    as unaligned for the agreement loss (it still feeds the anticollapse
    term).
    """

    flip_prob: float = 0.5
    rotate_prob: float = 0.2
    crop_prob: float = 0.2
    photometric: bool = True
    max_rotate_deg: float = 10.0
    crop_min: float = 0.9


@dataclass
class Correspondence:
    aligned: bool
    flip: bool

    @property
    def kind(self) -> str:
        if not self.aligned:
            return "unaligned"
        return "column-reversal" if self.flip else "identity"


def _to_pil(image: np.ndarray) -> Image.Image:
    return Image.fromarray(
        np.clip(np.round(image.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8))


def _from_pil(img: Image.Image) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _rotate(image: np.ndarray, angle: float) -> np.ndarray:
    fill = tuple(int(round(c * 255)) for c in image.mean(axis=(1, 2)))
    img = _to_pil(image).rotate(angle, resample=Image.BILINEAR, fillcolor=fill)
    return _from_pil(img)


def _crop_resize(image: np.ndarray, scale: float, fy: float, fx: float) -> np.ndarray:
    size = image.shape[1]
    window = max(1, int(round(size * scale)))
    if window >= size:
        return image, True
    top = int(round(fy * (size - window)))
    left = int(round(fx * (size - window)))
    img = _to_pil(image).crop((left, top, left + window, top + window))
    return _from_pil(img.resize((size, size), Image.BILINEAR)), False


def _photometric(image: np.ndarray, rng) -> np.ndarray:
    out = image * rng.uniform(0.85, 1.15)
    mean = out.mean()
    out = (out - mean) * rng.uniform(0.85, 1.15) + mean
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _augment_view(image: np.ndarray, rng, policy: AugmentPolicy):
    """One view's independent draws; returns (view, grid-integral?)."""
    view = image
    integral = True
    if policy.rotate_prob > 0 and rng.uniform() < policy.rotate_prob:
        view = _rotate(view, rng.uniform(-policy.max_rotate_deg,
                                         policy.max_rotate_deg))
        integral = False
    if policy.crop_prob > 0 and rng.uniform() < policy.crop_prob:
        view, identity = _crop_resize(view, rng.uniform(policy.crop_min, 1.0),
                                      rng.uniform(), rng.uniform())
        integral = integral and identity
    if policy.photometric:
        view = _photometric(view, rng)
    return view, integral


def augment_pair(image: np.ndarray, seed: int,
                 policy: AugmentPolicy | None = None):
    """Two augmented views plus their grid correspondence.

    Returns (view_a, view_b, Correspondence). The correspondence is exact:
    identity or column reversal when both views stayed on the pixel
    lattice, unaligned otherwise.
    """
    policy = policy or AugmentPolicy()
    rng = np.random.default_rng(seed)
    flip = policy.flip_prob > 0 and rng.uniform() < policy.flip_prob
    view_a, ok_a = _augment_view(image, rng, policy)
    base_b = image[:, :, ::-1] if flip else image
    view_b, ok_b = _augment_view(np.ascontiguousarray(base_b), rng, policy)
    return (np.ascontiguousarray(view_a, dtype=np.float32),
            np.ascontiguousarray(view_b, dtype=np.float32),
            Correspondence(aligned=ok_a and ok_b, flip=flip))


# ---------------------------------------------------------------------------
# sampling


def balanced_indices(labels, seed: int = 0):
    """Infinite index stream with class-balanced expectation: each example
    is drawn with probability proportional to 1 / (its class's count)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("no examples to sample")
    counts = np.bincount(labels)
    if (counts == 0).any():
        empty = int(np.flatnonzero(counts == 0)[0])
        raise ValueError(f"class {empty} has no examples")
    weights = 1.0 / counts[labels]
    weights = weights / weights.sum()
    rng = np.random.default_rng(seed)
    while True:
        for idx in rng.choice(labels.size, size=4096, p=weights):
            yield int(idx)


# ---------------------------------------------------------------------------
# optimizer


class _SGD:
    """Plain SGD with momentum over (tensor list, lr) groups."""

    def __init__(self, groups, momentum: float = 0.9):
        self.groups = [(list(tensors), float(lr)) for tensors, lr in groups]
        self.momentum = momentum
        self.buffers = {}

    def step(self) -> None:
        for tensors, lr in self.groups:
            for tensor in tensors:
                if tensor.grad is None:
                    continue
                buf = self.buffers.get(id(tensor))
                if buf is None:
                    buf = np.zeros_like(tensor.data)
                    self.buffers[id(tensor)] = buf
                np.multiply(buf, self.momentum, out=buf)
                np.add(buf, tensor.grad, out=buf)
                tensor.data -= lr * buf

    def zero(self) -> None:
        for tensors, _ in self.groups:
            ad.zero_grads(tensors)


def _check_finite(value: float, step: int, stage: str) -> None:
    if not np.isfinite(value):
        raise RuntimeError(f"{stage} loss became {value} at update {step}")


# ---------------------------------------------------------------------------
# stage one


def pretrain_prototypes(model, images: np.ndarray, config: TrainConfig,
                        policy: AugmentPolicy | None = None):
    """Self-supervised prototype pretraining; labels are never seen.

    Each update draws a batch of images, builds two augmented views per
    image, and minimizes  align_weight * L_align  +  anticollapse_weight *
    L_anticollapse  over the backbone and prototype head. The scoring
    sheet is untouched.
    """
    policy = policy or AugmentPolicy()
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or len(images) == 0:
        raise ValueError("pretraining needs a non-empty stack of images")
    rng = np.random.default_rng(config.seed)
    params = model.backbone_parameters()
    opt = _SGD([(params, config.lr_pretrain)], momentum=config.momentum)

    for step in range(config.pretrain_updates):
        idx = rng.choice(len(images), size=config.batch_size,
                         replace=len(images) < config.batch_size)
        views_a, views_b, flips, included = [], [], [], []
        for i in idx:
            a, b, corr = augment_pair(images[i], int(rng.integers(2**63)),
                                      policy)
            views_a.append(a)
            views_b.append(b)
            flips.append(corr.flip)
            included.append(corr.aligned)
        stacked = np.concatenate([np.stack(views_a), np.stack(views_b)])
        x, _ = model._standardize(stacked)

        with ad.record():
            z = model.forward_grid(ad.Tensor(x))
            n = len(idx)
            za = ad.slice_batch(z, 0, n)
            zb = ad.slice_batch(z, n, 2 * n)
            align = ad.align_agreement(za, zb, np.array(flips),
                                       np.array(included))
            presence, _ = ad.spatial_max_pool(z)
            # keep-alive pressure on each prototype's strongest activation
            # in the batch; a summed aggregate saturates the tanh and lets
            # prototypes idle at trace presence, so the max is what
            # actually forces every prototype to claim territory
            coverage = ad.tanh(ad.max_batch(presence))
            anticollapse = ad.neg(ad.mean_all(
                ad.log(ad.add_scalar(coverage, 1e-8))))
            loss = ad.add(ad.mul_scalar(align, config.align_weight),
                          ad.mul_scalar(anticollapse,
                                        config.anticollapse_weight))
            _check_finite(loss.item(), step, "pretraining")
            ad.backward(loss)
        opt.step()
        opt.zero()
    return model


def alignment_agreement(model, images: np.ndarray, seed: int = 0,
                        policy: AugmentPolicy | None = None,
                        pairs: int = 64) -> float:
    """Mean per-location inner product of grid vectors across aligned view
    pairs; ~1/P at initialization, approaches 1 as views agree."""
    policy = policy or AugmentPolicy()
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    for _ in range(10):
        idx = rng.choice(len(images), size=min(pairs, len(images)),
                         replace=len(images) < pairs)
        for i in idx:
            a, b, corr = augment_pair(images[i], int(rng.integers(2**63)),
                                      policy)
            if not corr.aligned:
                continue
            za = model.encode(a)
            zb = model.encode(b)
            if corr.flip:
                zb = zb[:, :, ::-1]
            total += float((za * zb).sum(axis=0).mean())
            count += 1
        if count:
            return total / count
    raise ValueError("policy produced no aligned pairs to measure")


# ---------------------------------------------------------------------------
# stage two


def _accuracy_f1(model, images: np.ndarray, labels: np.ndarray,
                 batch_size: int) -> tuple[float, float]:
    # abstentions count as wrong everywhere
    preds = np.array([p.label for p in
                      model.predict_batch(images, batch_size=batch_size)])
    accuracy = float((preds == labels).mean())
    classes = np.unique(labels)
    f1s = []
    for c in classes:
        tp = int(((preds == c) & (labels == c)).sum())
        fp = int(((preds == c) & (labels != c)).sum())
        fn = int(((preds != c) & (labels == c)).sum())
        f1s.append(2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0)
    if len(classes) == 2:
        f1 = f1s[-1]  # F1 of the positive (highest-id) class
    else:
        f1 = float(np.mean(f1s))
    return accuracy, f1


def _sparsity(model) -> float:
    return float((model.sheet.effective() == 0).mean())


def train_classifier(model, images: np.ndarray, labels, config: TrainConfig,
                     eval_images: np.ndarray | None = None,
                     eval_labels=None):
    """Stage two: scoring-sheet training with backbone fine-tuning.

    After every optimizer step the class weights are clamped to >= 0 and
    shrunk by sparsity_bias * lr_head (truncated gradient), which drives
    unused weights to exact zero. Returns (model, TrainingCurve); the curve
    is evaluated on (eval_images, eval_labels) when given, else on the
    training data.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) != len(labels) or len(images) == 0:
        raise ValueError("images and labels must be non-empty and parallel")
    if np.unique(labels).size < 2:
        raise ValueError("training needs at least two classes")
    if eval_images is None:
        eval_images, eval_labels = images, labels
    else:
        eval_labels = np.asarray(eval_labels, dtype=np.int64)

    class_w = model.params["class_w"]
    opt = _SGD([(model.backbone_parameters(), config.lr_backbone),
                ([class_w], config.lr_head)], momentum=config.momentum)
    sampler = balanced_indices(labels, seed=config.seed)
    shrink = config.sparsity_bias * config.lr_head
    curve = TrainingCurve()

    for step in range(1, config.train_updates + 1):
        idx = [next(sampler) for _ in range(config.batch_size)]
        x, _ = model._standardize(images[idx])
        batch_labels = labels[idx]

        with ad.record():
            z = model.forward_grid(ad.Tensor(x))
            presence, _ = ad.spatial_max_pool(z)
            scores = ad.matmul(presence, class_w)
            logits = ad.log1p(scores)
            loss = ad.cross_entropy_logits(logits, batch_labels)
            _check_finite(loss.item(), step, "classifier")
            ad.backward(loss)
        opt.step()
        opt.zero()
        np.maximum(class_w.data, 0.0, out=class_w.data)
        class_w.data -= shrink
        np.maximum(class_w.data, 0.0, out=class_w.data)

        if step % config.eval_interval == 0 or step == config.train_updates:
            if not curve.records or curve.records[-1][0] != step:
                accuracy, f1 = _accuracy_f1(model, eval_images, eval_labels,
                                            config.batch_size)
                curve.append(step, _sparsity(model), f1, accuracy)
    return model, curve
