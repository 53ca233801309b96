"""Command-line entry point: synth, train, train-semi, finetune, predict, eval.

Every command reads an optional JSON run config (``--config``) with the
sections ``phantom``, ``segnet``, ``discriminator``, ``training``,
``postprocess`` and ``paths`` plus a top-level ``seed``.  Command-line flags
override the matching keys.

Exit codes: 0 ok, 2 config error, 3 data error, 4 pipeline precondition
(missing or unusable ``--init`` checkpoint).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from PIL import Image

from .data_io import (
    DataError, MissingSlices, load_dataset, read_mask_dir, save_volume, window_normalize, write_mask,
)
from .discriminator import DiscriminatorConfig
from .metrics import EmptyEvaluation, evaluate_dataset
from .phantom import DomainShift, PhantomSpec, generate_dataset
from .postprocess import PostprocessConfig, postprocess_prediction
from .segnet import SegNetConfig, desk_config
from .training import (
    Checkpoint, CheckpointError, EmptyDataset, MissingPretrain, TrainingConfig, fine_tune, predict_slices,
    train_semi, train_supervised,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_PRECONDITION = 0, 2, 3, 4
OUTPUT_VERSION = 1
SECTIONS = ("phantom", "segnet", "discriminator", "training", "postprocess", "paths")
PATH_KEYS = ("labeled_dir", "unlabeled_dir", "input_dir", "init_checkpoint", "output_dir")
# files that mark a directory as something this tool wrote and may replace
OWNED_MARKERS = ("synth_manifest.json", "predict_manifest.json", "manifest.json")
SHIFT_KEYS = {"offset": "hu_offset", "scale": "contrast_scale", "noise": "extra_noise_sigma"}


class ConfigError(ValueError):
    pass


class AlignmentError(DataError):
    pass


# --------------------------------------------------------------------------- config

def load_run_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    unknown = set(cfg) - set(SECTIONS) - {"seed", "patients", "prefix", "arch"}
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    for sec in SECTIONS:
        if not isinstance(cfg.get(sec, {}), dict):
            raise ConfigError(f"{path}: section {sec!r} must be an object")
    bad_paths = set(cfg.get("paths", {})) - set(PATH_KEYS)
    if bad_paths:
        raise ConfigError(f"{path}: unknown path keys {sorted(bad_paths)}")
    return cfg


def parse_domain_shift(text: str) -> DomainShift:
    """``offset=100,scale=1.2,noise=5`` (field names also accepted)."""
    kw = {}
    for item in filter(None, text.split(",")):
        key, sep, value = item.partition("=")
        key = SHIFT_KEYS.get(key.strip(), key.strip())
        if not sep or key not in SHIFT_KEYS.values():
            raise ConfigError(f"bad --domain-shift item {item!r}; use offset=,scale=,noise=")
        try:
            kw[key] = float(value)
        except ValueError:
            raise ConfigError(f"bad --domain-shift value {value!r}") from None
    return DomainShift(**kw)


def resolve(args) -> dict:
    """Merge the JSON config with command-line overrides."""
    cfg = load_run_config(args.config)
    cfg = {**cfg, **{sec: dict(cfg.get(sec, {})) for sec in SECTIONS}}

    def put(section, key, value):
        if value is not None:
            if section is None:
                cfg[key] = value
            else:
                cfg[section][key] = value

    put(None, "seed", args.seed)
    put("paths", "output_dir", args.out)
    for flag, section, key in (
        ("patients", None, "patients"), ("prefix", None, "prefix"), ("arch", None, "arch"),
        ("image_size", "phantom", "image_size"), ("slices", "phantom", "n_slices_per_patient"),
        ("labeled", "paths", "labeled_dir"), ("unlabeled", "paths", "unlabeled_dir"),
        ("input", "paths", "input_dir"), ("init", "paths", "init_checkpoint"),
        ("epochs", "training", "epochs"), ("batch_size", "training", "batch_size"),
        ("lr", "training", "seg_lr"), ("disc_lr", "training", "disc_lr"),
    ):
        put(section, key, getattr(args, flag, None))
    if getattr(args, "domain_shift", None) is not None:
        cfg["phantom"]["domain_shift"] = vars(parse_domain_shift(args.domain_shift))
    if "seed" in cfg:
        cfg["training"]["seed"] = cfg["seed"]
    return cfg


def training_config(cfg: dict, phase: str) -> TrainingConfig:
    t = {**cfg["training"], "phase": phase}
    if phase == "semi":
        return TrainingConfig.semi(**t)
    return TrainingConfig.from_dict(t)


def require_path(cfg: dict, key: str, flag: str) -> Path:
    value = cfg["paths"].get(key)
    if not value:
        raise ConfigError(f"{flag} is required")
    return Path(value)


def output_dir(cfg: dict) -> Path:
    return require_path(cfg, "output_dir", "--out")


def check_replaceable(target: Path) -> None:
    if target.exists() and any(target.iterdir()) and not any((target / m).exists() for m in OWNED_MARKERS):
        raise ConfigError(f"refusing to overwrite non-empty directory {target}")


@contextmanager
def staged_dir(target: Path):
    """Yield a sibling temp dir that replaces ``target`` only on success."""
    check_replaceable(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        yield tmp
        if target.exists():
            shutil.rmtree(target)
        os.replace(tmp, target)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


# --------------------------------------------------------------------------- synth

def domain_stats(volumes) -> dict:
    slices = np.stack([s for v in volumes for s in v.slices]).astype(np.float64)
    masks = np.stack([m for v in volumes for m in v.masks])
    lesion = slices[masks > 0]
    return {
        "patients": len(volumes),
        "slices": int(slices.shape[0]),
        "mean_hu": round(float(slices.mean()), 4),
        "std_hu": round(float(slices.std()), 4),
        "lesion_fraction": round(float(masks.mean()), 6),
        "lesion_mean_hu": round(float(lesion.mean()), 4) if lesion.size else None,
    }


def cmd_synth(cfg: dict) -> int:
    try:
        spec = PhantomSpec.from_dict(cfg["phantom"])
    except TypeError as exc:
        raise ConfigError(f"bad phantom spec: {exc}") from exc
    spec.validate()
    n = int(cfg.get("patients", 10))
    if n < 1:
        raise ConfigError("--patients must be >= 1")
    seed = int(cfg.get("seed", 0))
    prefix = cfg.get("prefix", "p")
    out = output_dir(cfg)

    volumes = generate_dataset(spec, n, seed, prefix)
    domain = "source" if spec.domain_shift.is_identity else "shifted"
    stats = domain_stats(volumes)
    with staged_dir(out) as tmp:
        for v in volumes:
            save_volume(v, tmp / v.patient_id)
        write_json(tmp / "synth_manifest.json", {
            "version": OUTPUT_VERSION,
            "seed": seed,
            "prefix": prefix,
            "patient_ids": [v.patient_id for v in volumes],
            "phantom": spec.to_dict(),
            "domain_shift": vars(spec.domain_shift),
            "stats": {domain: stats},
        })
    print(f"domain={domain} " + " ".join(f"{k}={v}" for k, v in stats.items()))
    return EXIT_OK


# --------------------------------------------------------------------------- training

class EpochLines(logging.Handler):
    """Echo per-epoch training log lines to stdout and keep them for train.log."""

    def __init__(self):
        super().__init__(logging.INFO)
        self.lines: list[str] = []

    def emit(self, record):
        msg = record.getMessage()
        if msg.startswith("epoch "):
            self.lines.append(msg)
            print(msg, flush=True)


@contextmanager
def capture_epochs():
    logger = logging.getLogger("pe_advseg.training")
    handler, old_level = EpochLines(), logger.level
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)
    try:
        yield handler
    finally:
        logger.removeHandler(handler)
        logger.setLevel(old_level)


def load_labeled(path: Path):
    volumes = load_dataset(path)
    unlabeled = [v.patient_id for v in volumes if not v.labeled]
    if unlabeled:
        raise MissingSlices(f"{path}: patients without masks: {unlabeled[:5]}")
    return volumes


def load_init(cfg: dict) -> Checkpoint:
    value = cfg["paths"].get("init_checkpoint")
    if not value:
        raise MissingPretrain("--init checkpoint is required")
    try:
        return Checkpoint.load(value)
    except (CheckpointError, OSError, KeyError) as exc:
        raise MissingPretrain(f"unusable --init checkpoint {value}: {exc}") from exc


def segnet_config(cfg: dict, size: int) -> SegNetConfig:
    if cfg["segnet"]:
        return SegNetConfig.from_dict({"input_size": size, **cfg["segnet"]})
    arch = cfg.get("arch", "full")
    if arch == "desk":
        return desk_config(size)
    if arch == "full":
        return SegNetConfig(input_size=size)
    raise ConfigError(f"unknown arch {arch!r}")


def save_run(ck: Checkpoint, cfg: dict, handler: EpochLines) -> int:
    out = output_dir(cfg)
    check_replaceable(out)
    digest = ck.save(out, extra_files={
        "train.log": "".join(line + "\n" for line in handler.lines),
        "run_config.json": json.dumps(cfg, sort_keys=True, indent=2) + "\n",
    })
    print(f"checkpoint {out} manifest_hash={digest}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    config = training_config(cfg, "supervised")
    labeled = load_labeled(require_path(cfg, "labeled_dir", "--labeled"))
    net = segnet_config(cfg, labeled[0].slices[0].shape[-1])
    output_dir(cfg)
    with capture_epochs() as handler:
        ck = train_supervised(config, labeled, net)
    return save_run(ck, cfg, handler)


def disc_config(cfg: dict) -> DiscriminatorConfig:
    return DiscriminatorConfig.from_dict(cfg["discriminator"]) if cfg["discriminator"] else DiscriminatorConfig()


def cmd_train_semi(cfg: dict) -> int:
    init = load_init(cfg)
    config = training_config(cfg, "semi")
    labeled = load_labeled(require_path(cfg, "labeled_dir", "--labeled"))
    unl_dir = cfg["paths"].get("unlabeled_dir")
    unlabeled = load_dataset(unl_dir) if unl_dir else []
    output_dir(cfg)
    with capture_epochs() as handler:
        ck = train_semi(config, labeled, unlabeled, init, disc_config(cfg))
    return save_run(ck, cfg, handler)


def cmd_finetune(cfg: dict) -> int:
    init = load_init(cfg)
    config = training_config(cfg, "finetune")
    unlabeled = load_dataset(require_path(cfg, "unlabeled_dir", "--unlabeled"))
    output_dir(cfg)
    with capture_epochs() as handler:
        ck = fine_tune(config, unlabeled, init, disc_config(cfg))
    return save_run(ck, cfg, handler)


# --------------------------------------------------------------------------- predict / eval

def overlay_image(slice_hu, mask, window) -> np.ndarray:
    """8-bit RGB: windowed grayscale with the mask tinted red."""
    gray = window_normalize(slice_hu, *window) * 255.0
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    m = np.asarray(mask) > 0
    rgb[m] = 0.5 * rgb[m] + 0.5 * np.array([255.0, 0.0, 0.0])
    return np.rint(rgb).astype(np.uint8)


def cmd_predict(cfg: dict, postprocess: bool, overlay: bool, threshold: float) -> int:
    ck_path = require_path(cfg, "init_checkpoint", "--checkpoint")
    in_dir = require_path(cfg, "input_dir", "--input")
    out = output_dir(cfg)
    pp_config = PostprocessConfig(**cfg["postprocess"])
    if not ck_path.is_dir():
        raise MissingSlices(f"{ck_path}: checkpoint not found")
    ck = Checkpoint.load(ck_path)
    model = ck.build_segnet()
    window = (ck.config.window_lo, ck.config.window_hi)
    volumes = load_dataset(in_dir)

    warnings, n = [], 0
    with staged_dir(out) as tmp:
        for v in volumes:
            (tmp / v.patient_id / "masks").mkdir(parents=True)
            if overlay:
                (tmp / v.patient_id / "overlay").mkdir()
            preds = predict_slices(model, v.slices, window, threshold)
            for i, (s, p) in enumerate(zip(v.slices, preds)):
                if postprocess:
                    notes = []
                    p = postprocess_prediction(p, s, pp_config, notes)
                    warnings.extend({"patient": v.patient_id, "slice": i, **w} for w in notes)
                write_mask(tmp / v.patient_id / "masks" / f"{i:04d}.png", p)
                if overlay:
                    Image.fromarray(overlay_image(s, p, window), "RGB").save(
                        tmp / v.patient_id / "overlay" / f"{i:04d}.png", format="PNG")
                n += 1
        write_json(tmp / "predict_manifest.json", {
            "version": OUTPUT_VERSION,
            "checkpoint_hash": ck.manifest_hash,
            "postprocess": pp_config.__dict__ if postprocess else None,
            "threshold": threshold,
            "n_slices": n,
            "warnings": warnings,
        })
    print(f"predicted {n} slices for {len(volumes)} patients -> {out}")
    return EXIT_OK


def mask_patients(root: Path) -> list[str]:
    if not root.is_dir():
        raise MissingSlices(f"{root}: not a directory")
    return sorted(p.name for p in root.iterdir() if (p / "masks").is_dir())


def cmd_eval(cfg: dict, pred_dir: str, gt_dir: str, mode: str) -> int:
    pred_root, gt_root = Path(pred_dir), Path(gt_dir)
    out = Path(cfg["paths"].get("output_dir") or ".")
    gt_ids, pred_ids = mask_patients(gt_root), mask_patients(pred_root)
    if not gt_ids:
        raise MissingSlices(f"{gt_root}: no ground-truth masks")
    if gt_ids != pred_ids:
        raise AlignmentError(f"patients differ: gt-only {sorted(set(gt_ids) - set(pred_ids))[:5]}, "
                             f"pred-only {sorted(set(pred_ids) - set(gt_ids))[:5]}")
    pairs, slice_ids, patient_ids = [], [], []
    for pid in gt_ids:
        gts = read_mask_dir(gt_root / pid / "masks")
        preds = read_mask_dir(pred_root / pid / "masks")
        if len(gts) != len(preds):
            raise AlignmentError(f"{pid}: {len(preds)} predicted vs {len(gts)} ground-truth slices")
        for i, (p, g) in enumerate(zip(preds, gts)):
            if p.shape != g.shape:
                raise AlignmentError(f"{pid}/{i:04d}: shape {p.shape} vs {g.shape}")
            pairs.append((p, g))
            slice_ids.append(f"{pid}/{i:04d}")
            patient_ids.append(pid)
    report = evaluate_dataset(pairs, slice_ids, patient_ids, mode)
    out.mkdir(parents=True, exist_ok=True)
    tmp = out / ".report.json.tmp"
    tmp.write_text(report.to_json() + "\n")
    os.replace(tmp, out / "report.json")
    print(report.summary_line())
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def _global_flags(p: argparse.ArgumentParser, default) -> None:
    p.add_argument("--config", default=default, help="JSON run config")
    p.add_argument("--seed", type=int, default=default)
    p.add_argument("--out", default=default, help="output directory")


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="segmentation learning rate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pe-advseg", description=__doc__.splitlines()[0])
    _global_flags(parser, None)
    sub = parser.add_subparsers(dest="command", required=True)

    # global flags are accepted after the subcommand too
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)

    p = sub.add_parser("synth", parents=[common], help="write a phantom dataset")
    p.add_argument("--patients", type=int)
    p.add_argument("--prefix")
    p.add_argument("--image-size", type=int)
    p.add_argument("--slices", type=int, help="slices per patient")
    p.add_argument("--domain-shift", help="offset=HU,scale=X,noise=SIGMA")

    p = sub.add_parser("train", parents=[common], help="supervised pretraining")
    p.add_argument("--labeled")
    p.add_argument("--arch", choices=("full", "desk"), help="network size when no segnet section is given")
    _training_flags(p)

    p = sub.add_parser("train-semi", parents=[common], help="adversarial semi-supervised training")
    p.add_argument("--labeled")
    p.add_argument("--unlabeled")
    p.add_argument("--init", help="pretrained checkpoint directory")
    p.add_argument("--disc-lr", type=float)
    _training_flags(p)

    p = sub.add_parser("finetune", parents=[common], help="fine-tune on unlabeled data")
    p.add_argument("--unlabeled")
    p.add_argument("--init", help="checkpoint directory")
    _training_flags(p)

    p = sub.add_parser("predict", parents=[common], help="write predicted masks")
    p.add_argument("--checkpoint", dest="init")
    p.add_argument("--input")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--postprocess", action="store_true", help="apply the lung-mask correction")
    p.add_argument("--overlay", action="store_true", help="also write RGB review images")

    p = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mode", choices=("slice", "patient", "global"), default="slice")
    return parser


def run(args) -> int:
    cfg = resolve(args)
    if args.command == "synth":
        return cmd_synth(cfg)
    if args.command == "train":
        return cmd_train(cfg)
    if args.command == "train-semi":
        return cmd_train_semi(cfg)
    if args.command == "finetune":
        return cmd_finetune(cfg)
    if args.command == "predict":
        return cmd_predict(cfg, args.postprocess, args.overlay, args.threshold)
    return cmd_eval(cfg, args.pred, args.gt, args.mode)


def _fail(code: int, exc: BaseException) -> int:
    print(f"error: {' '.join(str(exc).split())}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except MissingPretrain as exc:
        return _fail(EXIT_PRECONDITION, exc)
    except (DataError, EmptyDataset, EmptyEvaluation, CheckpointError) as exc:
        return _fail(EXIT_DATA, exc)
    except (ValueError, TypeError) as exc:
        return _fail(EXIT_CONFIG, exc)


if __name__ == "__main__":
    sys.exit(main())
