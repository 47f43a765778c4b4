"""Command-line entry point: ``bayes-seg {synth,train,eval,predict}``.

Exit codes: 0 success, 2 usage or configuration error (including a missing
dataset), 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np
from PIL import Image

from . import __version__
from .calibration import (
    McConfig,
    merge_bins,
    mc_predict,
    reliability_svg,
    reliability_table,
    saliency_map,
    saliency_uncertainty,
    write_reliability_csv,
)
from .data import DataError, SyntheticSpec, generate_synthetic, load_folder, load_image, save_folder, split_dataset
from .segnet import (
    DECODER_STYLES,
    PLACEMENTS,
    STOCHASTIC_KINDS,
    ArchitectureConfig,
    CheckpointError,
    ConfigError,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import DomainError
from .train import NumericError, TrainConfig, evaluate, train
from .variational import FlowNumericError

log = logging.getLogger("bayes_seg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SEED_ENV = "BAYES_SEG_SEED"
EMIT_CHANNELS = ("mean", "mask", "uncertainty", "saliency", "saliency_std")
SPLITS = ("train", "val", "test")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------- schemas

def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_INT = {"type": "integer"}
_NUM = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}

SYNTH_SCHEMA = _obj({
    "count": _POS_INT, "image_size": {"type": "integer", "minimum": 8},
    "min_polyps": _POS_INT, "max_polyps": _POS_INT,
    "radius_min": {"type": "number", "exclusiveMinimum": 0}, "radius_max": {"type": "number", "exclusiveMinimum": 0},
    "fg_min": _NUM, "fg_max": _NUM, "bg_min": _NUM, "bg_max": _NUM,
    "noise_sigma": {"type": "number", "minimum": 0}, "seed": _INT,
})

ARCH_SCHEMA = _obj({
    "decoder_style": {"enum": list(DECODER_STYLES)},
    "depth": _POS_INT, "base_channels": _POS_INT,
    "stochastic_kind": {"enum": list(STOCHASTIC_KINDS)},
    "placement": {"enum": list(PLACEMENTS)},
    "input_size": _POS_INT, "in_channels": {"const": 3},
    "sigma0": {"type": "number", "exclusiveMinimum": 0},
    "flow_steps": _POS_INT, "flow_hidden": _POS_INT,
})

TRAIN_SCHEMA = _obj({
    "batch_size": _POS_INT, "lr": {"type": "number", "minimum": 0},
    "beta1": _NUM, "beta2": _NUM, "eps": {"type": "number", "exclusiveMinimum": 0},
    "max_epochs": {"type": "integer", "minimum": 0}, "patience": _POS_INT,
    "kl_scale": {"type": ["number", "null"], "minimum": 0},
    "loss_kind": {"enum": ["dice", "jaccard", "bce", "total", "nll"]},
    "focal_alpha": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    "focal_gamma": {"type": "number", "minimum": 0},
    "grad_clip": {"type": ["number", "null"], "exclusiveMinimum": 0},
    "augment": {"type": "boolean"},
})

MC_SCHEMA = _obj({"num_samples": _POS_INT, "threshold": {"type": "number", "minimum": 0, "maximum": 1}})

RUN_SCHEMA = _obj({
    "seed": _INT,
    "output_dir": {"type": "string"},
    "dataset": {
        "oneOf": [
            _obj({"path": {"type": "string"}}, ["path"]),
            _obj({"synthetic": SYNTH_SCHEMA}, ["synthetic"]),
        ]
    },
    "architecture": ARCH_SCHEMA,
    "train": TRAIN_SCHEMA,
    "mc": MC_SCHEMA,
    "num_bins": _POS_INT,
}, required=["dataset", "output_dir"])


def _validate(doc, schema, what: str):
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if not errors:
        return
    err = jsonschema.exceptions.best_match(errors)
    where = ".".join(str(p) for p in err.absolute_path) or "<root>"
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        raise UsageError(f"{what}: unknown field(s) {', '.join(extra)} at {where}")
    raise UsageError(f"{what}: invalid field {where}: {err.message}")


def _read_json(path, what: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"{what} not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} {path} is not valid JSON: {exc}") from None


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- run config

def load_run_config(path) -> dict:
    """Validated run config with relative paths resolved against the config's directory."""
    cfg = _read_json(path, "config")
    _validate(cfg, RUN_SCHEMA, "config")
    base = Path(path).resolve().parent
    cfg["output_dir"] = str((base / cfg["output_dir"]).resolve())
    if "path" in cfg["dataset"]:
        cfg["dataset"]["path"] = str((base / cfg["dataset"]["path"]).resolve())
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            cfg["seed"] = int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    cfg.setdefault("seed", 0)
    return cfg


def _arch(cfg) -> ArchitectureConfig:
    try:
        return ArchitectureConfig(**cfg.get("architecture", {})).validate()
    except ConfigError as exc:
        raise UsageError(f"config: architecture: {exc}") from None


def _train_cfg(cfg) -> TrainConfig:
    return TrainConfig(**cfg.get("train", {}), seed=cfg["seed"]).validate()


def _mc_cfg(cfg, num_samples=None) -> McConfig:
    mc = dict(cfg.get("mc", {}))
    if num_samples is not None:
        mc["num_samples"] = num_samples
    return McConfig(**mc, seed=cfg["seed"])


def load_dataset(cfg, image_size: int):
    ds = cfg["dataset"]
    if "synthetic" in ds:
        spec = SyntheticSpec(**{**ds["synthetic"], "image_size": image_size})
        try:
            spec.validate()
        except ValueError as exc:
            raise UsageError(f"config: dataset.synthetic: {exc}") from None
        return generate_synthetic(spec)
    root = Path(ds["path"])
    for d in (root, root / "images", root / "masks"):
        if not d.is_dir():
            raise UsageError(f"dataset not found: {d}")
    return load_folder(root / "images", root / "masks", image_size)


def dataset_splits(cfg, image_size: int):
    return dict(zip(SPLITS, split_dataset(load_dataset(cfg, image_size), cfg["seed"])))


# -------------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    spec_doc = _read_json(args.spec, "spec")
    _validate(spec_doc, SYNTH_SCHEMA, "spec")
    spec = SyntheticSpec(**spec_doc)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(f"spec: {exc}") from None
    out = Path(args.out)
    samples = generate_synthetic(spec)
    try:
        save_folder(samples, out)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {out}: {exc}") from exc
    files = [{"id": s.id, "image": f"images/{s.id}.png", "mask": f"masks/{s.id}.png",
              "image_sha256": _sha256(out / "images" / f"{s.id}.png"),
              "mask_sha256": _sha256(out / "masks" / f"{s.id}.png")} for s in samples]
    _write_json(out / "manifest.json", {"spec": dataclasses.asdict(spec), "count": len(samples), "files": files})
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    arch = _arch(cfg)
    tcfg = _train_cfg(cfg)
    splits = dataset_splits(cfg, arch.input_size)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(arch, np.random.default_rng(cfg["seed"]))
    log.info("training %s/%s/%s on %d samples", arch.decoder_style, arch.stochastic_kind, arch.placement,
             len(splits["train"]))
    model, hist = train(model, (splits["train"], splits["val"]), tcfg)
    hist.to_csv(out / "history.csv")
    save_checkpoint(out / "model.ckpt", model, {"run_config": cfg, "best_epoch": hist.best_epoch})
    print(f"best epoch {hist.best_epoch}; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def _load_model(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    model, extra = load_checkpoint(path)
    if "run_config" not in extra:
        raise UsageError(f"{path}: checkpoint carries no run config")
    return model, extra["run_config"]


def cmd_eval(args) -> int:
    model, cfg = _load_model(args.checkpoint)
    if os.environ.get(SEED_ENV) is not None:
        cfg = copy.deepcopy(cfg)
        cfg["seed"] = int(os.environ[SEED_ENV])
    mc = _mc_cfg(cfg, args.mc)
    num_bins = args.bins or cfg.get("num_bins", 15)
    samples = dataset_splits(cfg, model.config.input_size)[args.split]
    res = evaluate(model, samples, mc, num_bins)
    out = Path(args.out) if args.out else Path(args.checkpoint).resolve().parent / f"eval_{args.split}"
    out.mkdir(parents=True, exist_ok=True)
    metrics = {**res.metrics, "split": args.split}
    _write_json(out / "metrics.json", metrics)
    rows = reliability_table(merge_bins(res.bins))
    write_reliability_csv(out / "reliability.csv", rows)
    (out / "reliability.svg").write_text(reliability_svg(rows, metrics["ece"]))
    if args.dump:
        np.savez(out / "predictions.npz", ids=np.array([p["id"] for p in res.per_image]),
                 mean_probs=np.stack([p["mean_probs"] for p in res.per_image]),
                 masks=np.stack([p["mask"] for p in res.per_image]))
    print(json.dumps({k: metrics[k] for k in ("iou", "recall", "ece")}, sort_keys=True))
    return EXIT_OK


def _to_u8(arr, lo: float, hi: float) -> np.ndarray:
    span = hi - lo if hi > lo else 1.0
    return np.round(np.clip((arr - lo) / span, 0.0, 1.0) * 255).astype(np.uint8)


def cmd_predict(args) -> int:
    emit = [c.strip() for c in args.emit.split(",") if c.strip()]
    unknown = [c for c in emit if c not in EMIT_CHANNELS]
    if unknown or not emit:
        raise UsageError(f"unknown emit channel(s) {unknown}; choose from {', '.join(EMIT_CHANNELS)}")
    model, cfg = _load_model(args.checkpoint)
    if os.environ.get(SEED_ENV) is not None:
        cfg = copy.deepcopy(cfg)
        cfg["seed"] = int(os.environ[SEED_ENV])
    mc = _mc_cfg(cfg, args.mc)
    image = load_image(args.image, model.config.input_size)
    mean, std, pred = mc_predict(model, image, mc)
    maps = {"mean": mean[0, 0], "mask": pred[0, 0], "uncertainty": std[0, 0]}
    if "saliency" in emit:
        maps["saliency"] = saliency_map(model, image)
    if "saliency_std" in emit:
        maps["saliency_std"] = saliency_uncertainty(model, image, mc)
    out = Path(args.out) if args.out else Path(args.image).resolve().parent
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    sidecar = {"image": str(args.image), "mc_samples": mc.num_samples, "channels": {}}
    for name in emit:
        arr = maps[name]
        # probabilities and masks keep their natural [0, 1] range; other maps stretch to their maximum
        lo, hi = (0.0, 1.0) if name in ("mean", "mask") else (0.0, float(arr.max()))
        path = out / f"{stem}_{name}.png"
        Image.fromarray(_to_u8(arr, lo, hi), "L").save(path)
        sidecar["channels"][name] = {"file": path.name, "min": float(arr.min()), "max": float(arr.max()),
                                     "scale_lo": lo, "scale_hi": hi if hi > lo else lo + 1.0}
    _write_json(out / f"{stem}_predict.json", sidecar)
    print(f"wrote {', '.join(emit)} for {args.image}")
    return EXIT_OK


# ---------------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bayes-seg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--spec", required=True, help="JSON synthetic-data spec")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", required=True, help="JSON run config")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=SPLITS, default="test")
    e.add_argument("--mc", type=int, default=None, help="MC samples (default from config)")
    e.add_argument("--bins", type=int, default=None, help="ECE bins (default 15)")
    e.add_argument("--out", default=None, help="output directory")
    e.add_argument("--dump", action="store_true", help="also write per-image predictions.npz")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="uncertainty and saliency maps for one image")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--mc", type=int, default=None)
    r.add_argument("--emit", default="mean,mask,uncertainty")
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"bayes-seg: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NumericError, FlowNumericError, DomainError, FloatingPointError) as exc:
        code, msg = EXIT_NUMERIC, str(exc)
    except (UsageError, CheckpointError, ConfigError, ValueError) as exc:
        code, msg = EXIT_CONFIG, str(exc)
    except DataError as exc:
        code, msg = EXIT_DATA, str(exc)
    print(f"bayes-seg: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
