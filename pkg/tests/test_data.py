"""Dataset generation tests: artifact insertion exactness, confound
bookkeeping, bit-level determinism, and per-study splits."""

import hashlib
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protoscope.data import (
    ArtifactSpec,
    DatasetItem,
    SyntheticSpec,
    generate,
    insert_artifact,
    load_items,
    load_manifest,
    load_mask,
    split_by_study,
    stack_images,
)


def black(size=64):
    return np.zeros((size, size, 3), dtype=np.uint8)


# ---------------------------------------------------------------------------
# insert_artifact


def test_zero_size_artifact_is_identity():
    img = (np.random.default_rng(0).integers(0, 255, size=(32, 32, 3))
           .astype(np.uint8))
    out, mask = insert_artifact(img, ArtifactSpec(size_frac=0.0))
    np.testing.assert_array_equal(out, img)
    assert mask.sum() == 0


def test_red_square_pixel_count():
    art = ArtifactSpec(size_frac=0.25, color=(230, 30, 30), margin=0)
    out, mask = insert_artifact(black(64), art, corner="top-left")
    red = (out == np.array([230, 30, 30], dtype=np.uint8)).all(axis=2)
    assert red.sum() == 256
    assert mask.sum() // 255 == 256
    np.testing.assert_array_equal(red, mask.astype(bool))


def test_pixels_outside_mask_untouched():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 255, size=(64, 64, 3)).astype(np.uint8)
    art = ArtifactSpec(size_frac=0.25, margin=2)
    for corner in ("top-left", "top-right", "bottom-left", "bottom-right"):
        out, mask = insert_artifact(img, art, corner=corner)
        keep = mask == 0
        np.testing.assert_array_equal(out[keep], img[keep])
        changed = (out != img).any(axis=2)
        assert not (changed & keep).any()


def test_artifact_out_of_bounds_rejected():
    with pytest.raises(ValueError, match="outside the image"):
        insert_artifact(black(32), ArtifactSpec(size_frac=1.0, margin=2))
    with pytest.raises(ValueError, match="corner"):
        insert_artifact(black(32), ArtifactSpec(), corner="center")
    with pytest.raises(ValueError, match="uint8"):
        insert_artifact(black(32).astype(np.float32), ArtifactSpec())


# ---------------------------------------------------------------------------
# generate


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "synthetic"
    spec = SyntheticSpec(image_size=32, train_per_class=20, test_per_class=8,
                         confound_rate=0.5, seed=3)
    generate(spec, root)
    return root, spec


def test_confound_counts_are_exact(dataset):
    root, spec = dataset
    rows = load_manifest(root)
    train1 = [r for r in rows if r.split == "train" and r.label == 1]
    assert sum(r.has_artifact for r in train1) == 10  # round(0.5 * 20)
    train0 = [r for r in rows if r.split == "train" and r.label == 0]
    test_rows = [r for r in rows if r.split == "test"]
    assert not any(r.has_artifact for r in train0)
    assert not any(r.has_artifact for r in test_rows)


def test_counterfactual_split_mirrors_class0_test(dataset):
    root, spec = dataset
    rows = load_manifest(root)
    cf = [r for r in rows if r.split == "counterfactual"]
    assert len(cf) == spec.test_per_class
    assert all(r.label == 0 and r.has_artifact for r in cf)
    test0_ids = {r.study_id for r in rows if r.split == "test" and r.label == 0}
    assert {r.study_id for r in cf} == test0_ids


def test_counterfactual_images_differ_only_inside_mask(dataset):
    root, spec = dataset
    items = load_items(root, "counterfactual")
    clean = {i.relpath.replace("counterfactual/", "test/"): i
             for i in load_items(root, "test") if i.label == 0}
    for item in items:
        twin = clean[item.relpath.replace("counterfactual/", "test/")]
        diff = (np.abs(item.image - twin.image) > 0).any(axis=0)
        assert item.artifact_mask is not None
        assert item.artifact_mask.sum() == spec.artifact.side(32) ** 2
        # artifact pixels may coincide with the underlying value, so the
        # changed set is contained in the mask, never outside it
        assert not (diff & ~item.artifact_mask).any()


def test_masks_cover_exact_artifact_pixels(dataset):
    root, spec = dataset
    color = np.array(spec.artifact.color, dtype=np.float32) / 255.0
    for item in load_items(root, "train"):
        if item.artifact_mask is None:
            continue
        inside = item.image[:, item.artifact_mask]
        expected = np.broadcast_to(color[:, None], inside.shape)
        np.testing.assert_allclose(inside, expected, atol=1e-6)


def test_zero_confound_rate_means_zero_masks(tmp_path):
    spec = SyntheticSpec(image_size=32, train_per_class=6, test_per_class=2,
                         confound_rate=0.0, seed=1)
    generate(spec, tmp_path / "d")
    rows = load_manifest(tmp_path / "d")
    train_and_test = [r for r in rows if r.split in ("train", "test")]
    assert not any(r.has_artifact for r in train_and_test)
    for row in train_and_test:
        assert load_mask(tmp_path / "d", row.relpath) is None


def tree_digest(root):
    digest = hashlib.sha256()
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for name in sorted(filenames):
            path = os.path.join(dirpath, name)
            digest.update(os.path.relpath(path, root).encode())
            with open(path, "rb") as fh:
                digest.update(fh.read())
    return digest.hexdigest()


def test_generation_is_bit_identical(tmp_path):
    spec = SyntheticSpec(image_size=32, train_per_class=8, test_per_class=4,
                         confound_rate=0.5, seed=9)
    generate(spec, tmp_path / "a")
    generate(spec, tmp_path / "b")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_different_seeds_differ(tmp_path):
    base = dict(image_size=32, train_per_class=4, test_per_class=2)
    generate(SyntheticSpec(seed=0, **base), tmp_path / "a")
    generate(SyntheticSpec(seed=1, **base), tmp_path / "b")
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "b")


def test_loaded_images_are_chw_unit_range(dataset):
    root, spec = dataset
    items = load_items(root, "train")
    assert len(items) == 2 * spec.train_per_class
    images = stack_images(items)
    assert images.shape == (40, 3, 32, 32)
    assert images.dtype == np.float32
    assert images.min() >= 0.0 and images.max() <= 1.0
    labels = {item.label for item in items}
    assert labels == {0, 1}


def test_classes_share_color_statistics(dataset):
    # the shortcut-free cue is boundary texture; mean color must not
    # separate the classes on its own
    root, _ = dataset
    items = load_items(root, "test")
    means = {0: [], 1: []}
    for item in items:
        means[item.label].append(item.image.mean())
    gap = abs(np.mean(means[0]) - np.mean(means[1]))
    spread = np.std(means[0]) + np.std(means[1])
    assert gap < spread


def test_spec_validation():
    with pytest.raises(ValueError, match="confound_rate"):
        SyntheticSpec(confound_rate=1.5)
    with pytest.raises(ValueError, match="at least one image"):
        SyntheticSpec(train_per_class=0)
    with pytest.raises(ValueError, match="divisible"):
        SyntheticSpec(train_per_class=5, images_per_study=2)
    with pytest.raises(ValueError, match="fit"):
        SyntheticSpec(image_size=16, artifact=ArtifactSpec(size_frac=1.0))


# ---------------------------------------------------------------------------
# split_by_study


def items_with_studies(assignment):
    return [DatasetItem(np.zeros((3, 2, 2), dtype=np.float32), 0, sid)
            for sid in assignment]


def test_single_image_studies_reduce_to_per_image_split():
    items = items_with_studies([f"s{i}" for i in range(10)])
    split = split_by_study(items, fraction=0.7, seed=0)
    assert len(split.train_ids) == 7 and len(split.test_ids) == 3
    assert set(split.train_ids) | set(split.test_ids) == {f"s{i}" for i in range(10)}


def test_one_study_cannot_split():
    items = items_with_studies(["only"] * 5)
    with pytest.raises(ValueError, match="at least 2 studies"):
        split_by_study(items, fraction=0.5, seed=0)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_no_study_straddles_the_split(seed):
    rng = np.random.default_rng(seed)
    n_studies = int(rng.integers(2, 12))
    assignment = [f"st{rng.integers(n_studies)}" for _ in range(40)]
    assignment += [f"st{i}" for i in range(n_studies)]  # every study present
    items = items_with_studies(assignment)
    split = split_by_study(items, fraction=0.5, seed=seed)
    assert not set(split.train_ids) & set(split.test_ids)
    assert len(split.train_ids) >= 1 and len(split.test_ids) >= 1


def test_split_fraction_counts_studies_not_images():
    # one giant study plus nine singletons: fraction applies to the 10 studies
    assignment = ["big"] * 50 + [f"s{i}" for i in range(9)]
    split = split_by_study(items_with_studies(assignment), fraction=0.5, seed=1)
    assert len(split.train_ids) + len(split.test_ids) == 10
    assert len(split.train_ids) == 5


def test_split_rejects_bad_fraction():
    items = items_with_studies(["a", "b"])
    with pytest.raises(ValueError, match="fraction"):
        split_by_study(items, fraction=0.0)


def test_generated_studies_never_cross_splits(dataset):
    root, _ = dataset
    rows = load_manifest(root)
    train_ids = {r.study_id for r in rows if r.split == "train"}
    test_ids = {r.study_id for r in rows if r.split == "test"}
    assert not train_ids & test_ids
