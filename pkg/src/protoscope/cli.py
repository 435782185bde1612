"""Command-line pipeline.

Subcommands cover the full workflow: generate a confounded dataset,
pretrain prototypes, train the scoring sheet, evaluate, export
explanations, detect shortcut prototypes, disable them, run the
counterfactual comparison, and serve the workbench API.

Configuration is flat key=value text. Defaults come from the library
dataclasses, a --config file overrides them, and --seed overrides any
seed. Unknown keys are rejected, and every run that produces files writes
the exact resolved configuration next to its outputs, so a run can be
reproduced from its output directory alone.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from dataclasses import fields

import numpy as np

from . import data as data_mod
from . import debug as debug_mod
from . import explain as explain_mod
from .data import ArtifactSpec, SyntheticSpec
from .model import ModelConfig, PrototypeClassifier
from .training import TrainConfig, pretrain_prototypes, train_classifier

_MODEL_KEYS = ("image_size", "num_prototypes", "num_classes", "backbone",
               "patch_scale", "relevance_epsilon", "abstain_epsilon")


# ---------------------------------------------------------------------------
# key=value plumbing


def read_kv(path) -> dict:
    out = {}
    with open(os.fspath(path)) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            out[key.strip()] = value.strip()
    return out


def resolve(defaults: dict, *layers) -> dict:
    """Defaults overlaid by each layer in turn; keys outside the defaults
    are rejected so typos fail loudly."""
    merged = dict(defaults)
    for layer in layers:
        for key, value in layer.items():
            if key not in defaults:
                raise ValueError(f"unknown config key {key!r} "
                                 f"(known: {', '.join(sorted(defaults))})")
            merged[key] = value
    return merged


def write_resolved(out_dir, mapping: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(os.fspath(out_dir), "resolved-config"), "w") as fh:
        for key in sorted(mapping):
            fh.write(f"{key}={mapping[key]}\n")


def prepare_output(path, force: bool) -> str:
    path = os.fspath(path)
    if os.path.exists(path) and os.listdir(path):
        if not force:
            raise ValueError(
                f"output directory {path!r} is not empty; pass --force to "
                "overwrite")
        shutil.rmtree(path)
    os.makedirs(path, exist_ok=True)
    return path


def _parse_backbone(text: str):
    return tuple(tuple(int(p) for p in stage.split(":"))
                 for stage in text.split(","))


def _format_backbone(backbone) -> str:
    return ",".join(f"{c}:{s}" for c, s in backbone)


def _seed_layer(args) -> dict:
    return {"seed": str(args.seed)} if args.seed is not None else {}


# ---------------------------------------------------------------------------
# config assembly per stage


def _gen_defaults() -> dict:
    spec = SyntheticSpec()
    return {
        "image_size": str(spec.image_size),
        "train_per_class": str(spec.train_per_class),
        "test_per_class": str(spec.test_per_class),
        "images_per_study": str(spec.images_per_study),
        "confound_rate": str(spec.confound_rate),
        "artifact_size_frac": str(spec.artifact.size_frac),
        "artifact_color": ",".join(str(c) for c in spec.artifact.color),
        "artifact_margin": str(spec.artifact.margin),
        "seed": str(spec.seed),
    }


def _spec_from_kv(kv: dict) -> SyntheticSpec:
    color = tuple(int(c) for c in kv["artifact_color"].split(","))
    return SyntheticSpec(
        image_size=int(kv["image_size"]),
        train_per_class=int(kv["train_per_class"]),
        test_per_class=int(kv["test_per_class"]),
        images_per_study=int(kv["images_per_study"]),
        confound_rate=float(kv["confound_rate"]),
        artifact=ArtifactSpec(float(kv["artifact_size_frac"]), color,
                              int(kv["artifact_margin"])),
        seed=int(kv["seed"]),
    )


def _train_defaults() -> dict:
    return {f.name: str(getattr(TrainConfig(), f.name))
            for f in fields(TrainConfig)}


def _model_defaults() -> dict:
    config = ModelConfig()
    out = {}
    for key in _MODEL_KEYS:
        value = getattr(config, key)
        out[key] = _format_backbone(value) if key == "backbone" else str(value)
    return out


def _model_from_kv(kv: dict) -> ModelConfig:
    return ModelConfig(
        image_size=int(kv["image_size"]),
        num_prototypes=int(kv["num_prototypes"]),
        num_classes=int(kv["num_classes"]),
        backbone=_parse_backbone(kv["backbone"]),
        patch_scale=float(kv["patch_scale"]),
        relevance_epsilon=float(kv["relevance_epsilon"]),
        abstain_epsilon=float(kv["abstain_epsilon"]),
    )


def _train_from_kv(kv: dict) -> TrainConfig:
    return TrainConfig(
        lr_head=float(kv["lr_head"]),
        lr_backbone=float(kv["lr_backbone"]),
        lr_pretrain=float(kv["lr_pretrain"]),
        batch_size=int(kv["batch_size"]),
        pretrain_updates=int(kv["pretrain_updates"]),
        train_updates=int(kv["train_updates"]),
        align_weight=float(kv["align_weight"]),
        anticollapse_weight=float(kv["anticollapse_weight"]),
        sparsity_bias=float(kv["sparsity_bias"]),
        momentum=float(kv["momentum"]),
        seed=int(kv["seed"]),
    )


def _config_layers(args, with_seed: bool = True) -> list:
    layers = []
    if args.config:
        layers.append(read_kv(args.config))
    if with_seed:
        layers.append(_seed_layer(args))
    return layers


def _load_checkpoint(path) -> PrototypeClassifier:
    path = os.fspath(path)
    if not os.path.isdir(path) or not os.path.exists(
            os.path.join(path, "config")):
        raise ValueError(
            f"no checkpoint at {path!r}; run pretrain (then train) first")
    return PrototypeClassifier.load(path)


def _dataset_artifact(root, overrides: dict) -> ArtifactSpec:
    """Artifact parameters from the dataset's own resolved-config, unless
    overridden."""
    kv = dict()
    resolved = os.path.join(os.fspath(root), "resolved-config")
    if os.path.exists(resolved):
        kv = read_kv(resolved)
    base = _gen_defaults()
    base.update({k: v for k, v in kv.items() if k in base})
    base.update({k: v for k, v in overrides.items() if k in base})
    color = tuple(int(c) for c in base["artifact_color"].split(","))
    return ArtifactSpec(float(base["artifact_size_frac"]), color,
                        int(base["artifact_margin"]))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    defaults = _gen_defaults()
    layers = []
    if args.spec and args.spec != "default":
        layers.append(read_kv(args.spec))
    layers.extend(_config_layers(args))
    kv = resolve(defaults, *layers)
    spec = _spec_from_kv(kv)
    out = prepare_output(args.output, args.force)
    data_mod.generate(spec, out)
    write_resolved(out, kv)
    print(json.dumps({"output": out,
                      "train": 2 * spec.train_per_class,
                      "test": 2 * spec.test_per_class}))
    return 0


def cmd_pretrain(args) -> int:
    defaults = {**_model_defaults(), **_train_defaults()}
    kv = resolve(defaults, *_config_layers(args))
    items = data_mod.load_items(args.dataset, "train")
    observed = items[0].image.shape[-1]
    if args.config is None or "image_size" not in read_kv(args.config):
        kv["image_size"] = str(observed)
    if int(kv["image_size"]) != observed:
        raise ValueError(
            f"config image_size {kv['image_size']} does not match the "
            f"dataset's {observed}")
    model_config = _model_from_kv(kv)
    train_config = _train_from_kv(kv)

    model = PrototypeClassifier.init(model_config, seed=train_config.seed)
    pretrain_prototypes(model, data_mod.stack_images(items), train_config)
    out = prepare_output(args.output, args.force)
    model.save(out)
    write_resolved(out, kv)
    print(json.dumps({"output": out, "updates": train_config.pretrain_updates}))
    return 0


def cmd_train(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    defaults = _train_defaults()
    kv = resolve(defaults, *_config_layers(args))
    train_config = _train_from_kv(kv)

    train_items = data_mod.load_items(args.dataset, "train")
    test_items = data_mod.load_items(args.dataset, "test")
    model, curve = train_classifier(
        model, data_mod.stack_images(train_items),
        data_mod.labels_of(train_items), train_config,
        eval_images=data_mod.stack_images(test_items),
        eval_labels=data_mod.labels_of(test_items))

    out = prepare_output(args.output, args.force)
    model.save(out)
    curve.save_csv(os.path.join(out, "curve.csv"))
    write_resolved(out, kv)
    print(json.dumps({"output": out, "updates": train_config.train_updates}))
    return 0


def cmd_eval(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    defaults = {"subset": "test", "positive_class": "1", "batch_size": "64"}
    kv = resolve(defaults, *_config_layers(args, with_seed=False))
    items = data_mod.load_items(args.dataset, kv["subset"])
    report = explain_mod.compute_metrics(
        model, items, positive_class=int(kv["positive_class"]),
        batch_size=int(kv["batch_size"]))
    payload = report.to_json()
    print(payload)
    if args.output:
        out = prepare_output(args.output, args.force)
        with open(os.path.join(out, "metrics.json"), "w") as fh:
            fh.write(payload + "\n")
        write_resolved(out, kv)
    return 0


def cmd_explain(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    defaults = {"subset": "test", "k": "10"}
    kv = resolve(defaults, *_config_layers(args, with_seed=False))
    items = data_mod.load_items(args.dataset, kv["subset"])
    out = prepare_output(args.output, args.force)

    cards = explain_mod.global_explanation(model)
    with open(os.path.join(out, "global.json"), "w") as fh:
        json.dump([c.to_dict() for c in cards], fh, indent=2)
    for card in cards:
        explain_mod.export_prototype_patches(
            model, items, card.prototype_id, out, k=int(kv["k"]))
    write_resolved(out, kv)
    print(json.dumps({"output": out, "prototypes": len(cards)}))
    return 0


def cmd_detect_shortcuts(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    defaults = {"subset": "train"}
    kv = resolve(defaults, *_config_layers(args, with_seed=False))
    items = data_mod.load_items(args.dataset, kv["subset"])
    report = debug_mod.detect_shortcuts(
        model, items, presence_thr=args.presence_thr,
        overlap_thr=args.overlap_thr)
    payload = report.to_json()
    print(payload)
    if args.output:
        out = prepare_output(args.output, args.force)
        with open(os.path.join(out, "shortcut_report.json"), "w") as fh:
            fh.write(payload + "\n")
        kv["presence_thr"] = str(args.presence_thr)
        kv["overlap_thr"] = str(args.overlap_thr)
        write_resolved(out, kv)
    return 0


def cmd_disable(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    if not args.prototypes:
        raise ValueError("pass --prototypes as a comma-separated id list")
    ids = [int(p) for p in args.prototypes.split(",")]
    out = prepare_output(args.output, args.force)

    previous_log = os.path.join(os.fspath(args.checkpoint),
                                "intervention_log.jsonl")
    log_path = os.path.join(out, "intervention_log.jsonl")
    if os.path.exists(previous_log):
        shutil.copy(previous_log, log_path)
    log = debug_mod.InterventionLog(log_path)
    debug_mod.disable(model, ids, log, actor="cli")
    model.save(out)
    write_resolved(out, {"prototypes": ",".join(str(i) for i in ids)})
    print(json.dumps({"output": out,
                      "disabled": sorted(int(i) for i in model.disabled)}))
    return 0


def cmd_counterfactual(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    defaults = {"target_class": "1", "detect_subset": "train",
                "eval_subset": "test", "seed": "0"}
    kv = resolve(defaults, *_config_layers(args))
    detect_items = data_mod.load_items(args.dataset, kv["detect_subset"])
    shortcut = debug_mod.detect_shortcuts(
        model, detect_items, presence_thr=args.presence_thr,
        overlap_thr=args.overlap_thr)
    eval_items = data_mod.load_items(args.dataset, kv["eval_subset"])
    artifact = _dataset_artifact(args.dataset, {})
    report = debug_mod.counterfactual_eval(
        model, eval_items, artifact, int(kv["target_class"]),
        shortcut.flagged_ids, seed=int(kv["seed"]))
    payload = report.to_json()
    print(payload)
    if args.output:
        out = prepare_output(args.output, args.force)
        with open(os.path.join(out, "counterfactual.json"), "w") as fh:
            fh.write(payload + "\n")
        with open(os.path.join(out, "shortcut_report.json"), "w") as fh:
            fh.write(shortcut.to_json() + "\n")
        kv["presence_thr"] = str(args.presence_thr)
        kv["overlap_thr"] = str(args.overlap_thr)
        write_resolved(out, kv)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .server import build_app

    app = build_app(args.checkpoint, args.dataset)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protoscope",
        description="Prototype-based image classification workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, output_required=True):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--force", action="store_true",
                       help="overwrite a non-empty output directory")
        p.add_argument("--output", required=output_required,
                       help="output directory")

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--spec", default="default",
                   help="'default' or a key=value file")
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain", help="stage one: prototype pretraining")
    p.add_argument("--dataset", required=True)
    common(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("train", help="stage two: scoring-sheet training")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="metrics on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    common(p, output_required=False)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("explain", help="export prototype cards and patches")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    common(p)
    p.set_defaults(fn=cmd_explain)

    p = sub.add_parser("detect-shortcuts",
                       help="flag prototypes that fire on the artifact")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--presence-thr", type=float, default=0.1)
    p.add_argument("--overlap-thr", type=float, default=0.2)
    common(p, output_required=False)
    p.set_defaults(fn=cmd_detect_shortcuts)

    p = sub.add_parser("disable", help="disable prototypes in a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prototypes", required=True,
                   help="comma-separated prototype ids")
    common(p)
    p.set_defaults(fn=cmd_disable)

    p = sub.add_parser("counterfactual",
                       help="artifact-insertion comparison, original vs "
                            "flagged-disabled")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--presence-thr", type=float, default=0.1)
    p.add_argument("--overlap-thr", type=float, default=0.2)
    common(p, output_required=False)
    p.set_defaults(fn=cmd_counterfactual)

    p = sub.add_parser("serve", help="run the workbench HTTP service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(fn=cmd_serve)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except Exception as exc:  # single-line machine-readable failure
        print(json.dumps({"error": str(exc),
                          "command": getattr(args, "command", None)}),
              file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))
