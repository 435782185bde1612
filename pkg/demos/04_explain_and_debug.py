#!/usr/bin/env python3
"""Read the trained model's scoring sheet, explain single predictions,
hunt for shortcut prototypes that fire on the pasted artifact, and repair
the model by disabling them. Run 02 and 03 first."""

import pathlib

from protoscope import data, debug, explain
from protoscope.model import PrototypeClassifier

OUT = pathlib.Path(__file__).resolve().parent / "_out"
DATA = OUT / "data"
CKPT = OUT / "checkpoint"

model = PrototypeClassifier.load(CKPT)
train_items = data.load_items(DATA, "train")
test_items = data.load_items(DATA, "test")

# the global explanation IS the model: every nonzero weight is visible
print("global explanation:", explain.global_size(model), "prototypes")
for card in explain.global_explanation(model)[:5]:
    weights = ", ".join(f"{w:.2f}" for w in card.class_weights)
    print(f"  p{card.prototype_id:02d} [{card.status}]  weights: {weights}")

# a local explanation lists where each counted prototype fired
image = test_items[0].image
result = explain.local_explanation(model, image)
print(f"\nimage 0 -> label {result.label} "
      f"(abstained: {result.abstained}), scores {result.scores}")
for entry in result.entries:
    print(f"  p{entry.prototype_id:02d} presence {entry.presence:.2f} "
          f"at cell {entry.location}, box {entry.rectangle}")

# metrics before repair
before = explain.compute_metrics(model, test_items)
print("\nbefore:", before.to_json())

# shortcut hunt: prototypes whose firing sites keep landing on the artifact
report = debug.detect_shortcuts(model, train_items,
                                presence_thr=0.1, overlap_thr=0.2)
print("\nflagged prototypes:", report.flagged_ids)
for row in report.rows:
    if row.activation_count:
        print(f"  p{row.prototype_id:02d} active on {row.activation_count}, "
              f"overlap fraction {row.overlap_fraction:.2f}"
              + ("  <- flagged" if row.flagged else ""))

# the repair is an intervention, not a retrain: disable and log
log = debug.InterventionLog(OUT / "interventions.jsonl")
debug.disable(model, report.flagged_ids, log, actor="demo")
print("\ndisabled:", sorted(model.disabled))
print("log lines:", len(log.entries))

# counterfactual check: does pasting the artifact still flip predictions?
artifact = data.ArtifactSpec()
cf = debug.counterfactual_eval(model, test_items, artifact,
                               target_class=1,
                               flagged_ids=report.flagged_ids)
print("\nsubset                    n   original  adapted")
for row in cf.rows:
    print(f"{row.subset:<24} {row.n:3d}   "
          f"{row.original['accuracy']:.3f}     {row.adapted['accuracy']:.3f}")
