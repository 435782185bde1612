#!/usr/bin/env python3
"""Build the two-class synthetic corpus and look at what makes it tricky:
one class is partially confounded with a colored corner patch, and a
counterfactual split re-issues clean test images with that patch pasted
in (plus exact masks) to measure how much a model leans on it."""

import pathlib

import numpy as np
from PIL import Image

from protoscope import data

OUT = pathlib.Path(__file__).resolve().parent / "_out"
DATA = OUT / "data"

spec = data.SyntheticSpec(image_size=32, train_per_class=24, test_per_class=8,
                          confound_rate=0.5, seed=11)
manifest_path = data.generate(spec, DATA)
print("wrote", manifest_path)

rows = data.load_manifest(DATA)
by_split = {}
for row in rows:
    by_split.setdefault(row.split, []).append(row)
for split, members in sorted(by_split.items()):
    artifacted = sum(r.has_artifact for r in members)
    print(f"{split:>14}: {len(members):3d} images, {artifacted} with artifact")

# training artifacts land only on class 1: that is the confound
train = by_split["train"]
for label in (0, 1):
    n = sum(r.has_artifact for r in train if r.label == label)
    print(f"  class {label} train images with artifact: {n}")

# counterfactual items carry pixel-exact masks of the pasted patch
cf_items = data.load_items(DATA, "counterfactual")
masked = [it for it in cf_items if it.artifact_mask is not None]
print(f"counterfactual items with masks: {len(masked)}/{len(cf_items)}")

# paste the artifact into an arbitrary clean image to see the mechanics
item = data.load_items(DATA, "test")[0]
hwc = (item.image.transpose(1, 2, 0) * 255).astype(np.uint8)
stamped, mask = data.insert_artifact(hwc, data.ArtifactSpec(), corner="bottom-right")
Image.fromarray(hwc).save(OUT / "clean.png")
Image.fromarray(stamped).save(OUT / "stamped.png")
Image.fromarray(mask).save(OUT / "mask.png")
print("before/after/mask saved under", OUT)
print("mask covers", int((mask > 0).sum()), "pixels")
