#!/usr/bin/env python3
"""Train a small classifier on the demo corpus: contrastive pretraining of
the prototype layer first, then the sparse scoring head. Run
02_synthetic_data.py before this one."""

import pathlib
import time

from protoscope import data
from protoscope.model import ModelConfig, PrototypeClassifier
from protoscope.training import TrainConfig, pretrain_prototypes, train_classifier

OUT = pathlib.Path(__file__).resolve().parent / "_out"
DATA = OUT / "data"
CKPT = OUT / "checkpoint"

train_items = data.load_items(DATA, "train")
test_items = data.load_items(DATA, "test")
images = data.stack_images(train_items)
labels = data.labels_of(train_items)
print(f"training on {len(images)} images")

config = ModelConfig(image_size=32, num_prototypes=12, num_classes=2,
                     backbone=((8, 2), (16, 2)))
model = PrototypeClassifier.init(config, seed=5)

# stage 1: align prototype responses across augmented views of each image
t0 = time.time()
pre_cfg = TrainConfig(pretrain_updates=60, batch_size=16, seed=5)
model = pretrain_prototypes(model, images, pre_cfg)
print(f"pretraining done in {time.time() - t0:.1f}s")

# stage 2: fit the non-negative scoring sheet (backbone stays frozen)
tr_cfg = TrainConfig(train_updates=300, batch_size=16, seed=5)
model, curve = train_classifier(
    model, images, labels, tr_cfg,
    eval_images=data.stack_images(test_items),
    eval_labels=data.labels_of(test_items))

print("updates  sparsity  f1      accuracy")
for updates, sparsity, f1, accuracy in curve.records:
    print(f"{updates:7d}  {sparsity:.3f}     {f1:.3f}   {accuracy:.3f}")

model.save(CKPT)
curve.save_csv(str(CKPT / "curve.csv"))
print("checkpoint saved to", CKPT)
