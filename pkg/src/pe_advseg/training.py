"""Losses, checkpoints and the two-phase (supervised, then adversarial
semi-supervised) training schedule, plus unlabeled fine-tuning."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import shutil
import struct
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data_io import DEFAULT_WINDOW, PatientVolume, ShapeMismatch, window_normalize
from .discriminator import Discriminator, DiscriminatorConfig, build_discriminator_input
from .segnet import SegNet, SegNetConfig

log = logging.getLogger(__name__)

EPS = 1e-7
MANIFEST_VERSION = 1
BLOB_MAGIC = b"PEPARAM1"


class EmptyDataset(ValueError):
    pass


class MissingPretrain(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    phase: str = "supervised"
    epochs: int = 100
    batch_size: int = 8
    seg_lr: float = 1e-4
    disc_lr: float = 1e-4
    momentum: float = 0.9
    lr_decay_power: float = 0.9
    lambda_adv_labeled: float = 0.01
    lambda_adv_unlabeled: float = 0.001
    lambda_semi: float = 0.1
    t_semi: float = 0.2
    dice_smoothing: float = 1.0
    seed: int = 0
    window_lo: float = DEFAULT_WINDOW[0]
    window_hi: float = DEFAULT_WINDOW[1]

    def __post_init__(self):
        if self.phase not in ("supervised", "semi", "finetune"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.seg_lr <= 0 or self.disc_lr <= 0:
            raise ValueError("learning rates must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if not 0 < self.t_semi < 1:
            raise ValueError("t_semi must be in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.window_lo < self.window_hi:
            raise ValueError("window_lo must be below window_hi")

    @classmethod
    def semi(cls, **kw) -> TrainingConfig:
        """Adversarial phase defaults: segmentation lr 2e-4, discriminator lr 1e-4."""
        return cls(**{"phase": "semi", "seg_lr": 2e-4, "disc_lr": 1e-4, **kw})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainingConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------- losses

def _as_nchw(t: torch.Tensor) -> torch.Tensor:
    while t.dim() < 4:
        t = t.unsqueeze(0)
    return t


def bce_dice_loss(logits, gt, smoothing: float = 1.0, dice_weight: float = 1.0) -> torch.Tensor:
    """Mean pixel BCE plus soft dice loss (dice computed per image, then averaged)."""
    logits, gt = _as_nchw(logits), _as_nchw(gt).to(logits.dtype)
    if logits.shape != gt.shape:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs gt {tuple(gt.shape)}")
    bce = F.binary_cross_entropy_with_logits(logits, gt)
    p = torch.sigmoid(logits)
    inter = (p * gt).sum(dim=(1, 2, 3))
    denom = p.sum(dim=(1, 2, 3)) + gt.sum(dim=(1, 2, 3))
    dice = 1 - (2 * inter + smoothing) / (denom + smoothing)
    return bce + dice_weight * dice.mean()


def _bce_prob(p: torch.Tensor, target: float) -> torch.Tensor:
    p = p.clamp(EPS, 1 - EPS)
    return -(torch.log(p) if target == 1 else torch.log1p(-p)).mean()


def discriminator_loss(conf_pred, conf_gt) -> torch.Tensor:
    """Prediction-derived maps labelled 0, ground-truth-derived maps labelled 1."""
    if conf_pred.shape != conf_gt.shape:
        raise ShapeMismatch(f"{tuple(conf_pred.shape)} vs {tuple(conf_gt.shape)}")
    return _bce_prob(conf_pred, 0) + _bce_prob(conf_gt, 1)


def adversarial_loss(conf_pred) -> torch.Tensor:
    return _bce_prob(conf_pred, 1)


def semi_supervised_loss(conf, logits, t_semi: float) -> torch.Tensor:
    """Self-training BCE against thresholded predictions on confident pixels.

    Pixels with discriminator confidence ``conf > t_semi`` take the pseudo
    label ``sigmoid(logit) >= 0.5``; returns 0 when no pixel qualifies.
    """
    conf, logits = _as_nchw(conf), _as_nchw(logits)
    if conf.shape != logits.shape:
        raise ShapeMismatch(f"conf {tuple(conf.shape)} vs logits {tuple(logits.shape)}")
    keep = conf.detach() > t_semi
    if not keep.any():
        return logits.sum() * 0.0
    pseudo = (logits.detach() >= 0).to(logits.dtype)  # sigmoid(l) >= 0.5  <=>  l >= 0
    per_pixel = F.binary_cross_entropy_with_logits(logits, pseudo, reduction="none")
    return per_pixel[keep].mean()


# --------------------------------------------------------------------------- checkpoints

def encode_params(state: dict) -> bytes:
    """Serialize a state dict to the ``*.params`` blob layout.

    Layout: 8-byte magic ``PEPARAM1``, little-endian uint32 header length,
    UTF-8 JSON header ``{"tensors": [{"name", "dtype", "shape", "offset",
    "nbytes"}, ...]}`` (sorted keys, no whitespace), then the raw tensor bytes
    in C order and little-endian, concatenated in header order. Offsets are
    relative to the start of the data section.
    """
    entries, chunks, offset = [], [], 0
    for name in sorted(state):
        arr = state[name].detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    return BLOB_MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks)


def decode_params(blob: bytes) -> dict:
    if blob[:8] != BLOB_MAGIC:
        raise CheckpointError("not a parameter blob (bad magic)")
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + hlen])
    data = memoryview(blob)[12 + hlen:]
    state = {}
    for e in header["tensors"]:
        arr = np.frombuffer(data[e["offset"]:e["offset"] + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        state[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    return state


def _sha256(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def params_hash(module_or_state) -> str:
    state = module_or_state.state_dict() if hasattr(module_or_state, "state_dict") else module_or_state
    return _sha256(encode_params(state))


@dataclass
class Checkpoint:
    seg_state: dict
    segnet_config: SegNetConfig
    config: TrainingConfig
    epoch: int = 0
    loss_history: list = field(default_factory=list)
    disc_state: dict | None = None
    disc_config: DiscriminatorConfig | None = None
    init_hash: str | None = None

    def _blobs(self) -> dict[str, bytes]:
        blobs = {"seg.params": encode_params(self.seg_state)}
        if self.disc_state is not None:
            blobs["disc.params"] = encode_params(self.disc_state)
        return blobs

    def _manifest(self, blobs) -> dict:
        body = {
            "version": MANIFEST_VERSION,
            "config": self.config.to_dict(),
            "segnet": self.segnet_config.to_dict(),
            "discriminator": self.disc_config.to_dict() if self.disc_config else None,
            "epoch": self.epoch,
            "loss_history": self.loss_history,
            "init_hash": self.init_hash,
            "blobs": {k: _sha256(v) for k, v in sorted(blobs.items())},
        }
        body["manifest_hash"] = _sha256(json.dumps(body, sort_keys=True).encode())
        return body

    @property
    def manifest_hash(self) -> str:
        return self._manifest(self._blobs())["manifest_hash"]

    def save(self, directory, extra_files: dict[str, str] | None = None) -> str:
        """Write atomically: build in a sibling temp dir, then rename into place."""
        target = Path(directory)
        target.parent.mkdir(parents=True, exist_ok=True)
        blobs = self._blobs()
        manifest = self._manifest(blobs)
        tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
        try:
            for name, data in blobs.items():
                (tmp / name).write_bytes(data)
            for name, text in (extra_files or {}).items():
                (tmp / name).write_text(text)
            (tmp / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
            if target.exists():
                shutil.rmtree(target)
            os.replace(tmp, target)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        return manifest["manifest_hash"]

    @classmethod
    def load(cls, directory) -> Checkpoint:
        root = Path(directory)
        try:
            manifest = json.loads((root / "manifest.json").read_text())
        except (OSError, ValueError) as exc:
            raise CheckpointError(f"{root}: unreadable manifest ({exc})") from exc
        if manifest.get("version") != MANIFEST_VERSION:
            raise CheckpointError(f"{root}: unsupported manifest version {manifest.get('version')}")
        blobs = {}
        for name, digest in manifest["blobs"].items():
            data = (root / name).read_bytes()
            if _sha256(data) != digest:
                raise CheckpointError(f"{root / name}: content hash mismatch")
            blobs[name] = data
        ck = cls(
            seg_state=decode_params(blobs["seg.params"]),
            segnet_config=SegNetConfig.from_dict(manifest["segnet"]),
            config=TrainingConfig.from_dict(manifest["config"]),
            epoch=manifest["epoch"],
            loss_history=manifest["loss_history"],
            disc_state=decode_params(blobs["disc.params"]) if "disc.params" in blobs else None,
            disc_config=DiscriminatorConfig.from_dict(manifest["discriminator"])
            if manifest["discriminator"] else None,
            init_hash=manifest["init_hash"],
        )
        if ck.manifest_hash != manifest["manifest_hash"]:
            raise CheckpointError(f"{root}: manifest hash mismatch")
        return ck

    def build_segnet(self) -> SegNet:
        model = SegNet(self.segnet_config)
        model.load_state_dict(self.seg_state)
        return model


# --------------------------------------------------------------------------- data

def volumes_to_tensors(volumes: Sequence[PatientVolume], window=DEFAULT_WINDOW, labeled=True):
    """Stack every slice as (N, 1, H, W) float32 images (and masks if ``labeled``)."""
    imgs, masks = [], []
    for v in volumes:
        for i, s in enumerate(v.slices):
            imgs.append(window_normalize(s, *window))
            if labeled:
                if v.masks is None:
                    raise EmptyDataset(f"{v.patient_id} has no masks")
                masks.append(v.masks[i].astype(np.float32))
    if not imgs:
        return torch.empty(0, 1, 8, 8), (torch.empty(0, 1, 8, 8) if labeled else None)
    x = torch.from_numpy(np.stack(imgs)[:, None])
    y = torch.from_numpy(np.stack(masks)[:, None]) if labeled else None
    return x, y


def batch_order(n: int, batch_size: int, seed: int, epoch: int, stream: int = 0) -> list[np.ndarray]:
    """Seed-determined shuffled mini-batches; independent of torch's global RNG."""
    perm = np.random.default_rng([seed, stream, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def poly_lr(base: float, it: int, max_iter: int, power: float) -> float:
    return base * (1 - it / max_iter) ** power if max_iter else base


def _set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def _sgd(model, cfg: TrainingConfig, lr: float):
    return torch.optim.SGD(model.parameters(), lr=lr, momentum=cfg.momentum)


def _adam(model, cfg: TrainingConfig):
    return torch.optim.Adam(model.parameters(), lr=cfg.disc_lr, betas=(0.9, 0.99))


def _state_copy(model) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


EpochCallback = Callable[[int, SegNet, "Discriminator | None"], None]


def train_supervised(config: TrainingConfig, labeled_data: Sequence[PatientVolume],
                     segnet_config: SegNetConfig | None = None, init: Checkpoint | None = None,
                     epoch_callback: EpochCallback | None = None) -> Checkpoint:
    """SGD on BCE + dice with polynomial lr decay.

    Starts from ``init`` when given (its network config wins), otherwise from
    a fresh network seeded by ``config.seed``.
    """
    window = (config.window_lo, config.window_hi)
    x, y = volumes_to_tensors(labeled_data, window)
    if len(x) == 0:
        raise EmptyDataset("labeled dataset is empty")
    torch.manual_seed(config.seed)
    if init is not None:
        model = init.build_segnet()
    else:
        model = SegNet(segnet_config or SegNetConfig(input_size=x.shape[-1]))
    opt = _sgd(model, config, config.seg_lr)

    n_batches = math.ceil(len(x) / config.batch_size)
    max_iter = config.epochs * n_batches
    history, it = [], 0
    for epoch in range(config.epochs):
        model.train()
        total, count = 0.0, 0
        for idx in batch_order(len(x), config.batch_size, config.seed, epoch):
            _set_lr(opt, poly_lr(config.seg_lr, it, max_iter, config.lr_decay_power))
            out = model(x[idx])
            loss = bce_dice_loss(out.logits, y[idx], config.dice_smoothing)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
            it += 1
        history.append({"epoch": epoch, "seg_loss": total / count})
        log.info("epoch %d seg_loss %.6f", epoch, total / count)
        if epoch_callback:
            epoch_callback(epoch, model, None)

    return Checkpoint(
        seg_state=_state_copy(model), segnet_config=model.config, config=config,
        epoch=config.epochs, loss_history=history,
        init_hash=init.manifest_hash if init is not None else None,
    )


def segmentation_step(seg: SegNet, disc: Discriminator, opt, config: TrainingConfig,
                      x_lab=None, y_lab=None, x_unl=None):
    """One SGD step of the segmentation network with the discriminator frozen.

    Returns ``(losses, labeled_output)``; the labeled output feeds the
    following discriminator step.
    """
    w = disc.config.mask_weight
    disc.requires_grad_(False)
    loss = torch.zeros(())
    stats = {}
    out_l = None
    if x_lab is not None and len(x_lab):
        out_l = seg(x_lab)
        loss = bce_dice_loss(out_l.logits, y_lab, config.dice_smoothing)
        if config.lambda_adv_labeled != 0:
            conf = disc(build_discriminator_input(torch.sigmoid(out_l.logits), out_l.encoder_features, w))
            loss = loss + config.lambda_adv_labeled * adversarial_loss(conf)
    if x_unl is not None and len(x_unl):
        out_u = seg(x_unl)
        conf_u = disc(build_discriminator_input(torch.sigmoid(out_u.logits), out_u.encoder_features, w))
        semi = semi_supervised_loss(conf_u, out_u.logits, config.t_semi)
        adv = adversarial_loss(conf_u)
        loss = loss + config.lambda_semi * semi + config.lambda_adv_unlabeled * adv
        stats["semi_loss"] = semi.item()
        stats["adv_loss"] = adv.item()
    if loss.requires_grad:
        opt.zero_grad()
        loss.backward()
        opt.step()
    disc.requires_grad_(True)
    stats["seg_loss"] = loss.item()
    return stats, out_l


def discriminator_step(disc: Discriminator, opt, out_lab, y_lab) -> float:
    """One step separating prediction-derived from ground-truth-derived maps.

    Works on detached segmentation outputs, so segmentation parameters are
    never touched.
    """
    w = disc.config.mask_weight
    feats = out_lab.encoder_features.detach()
    conf_pred = disc(build_discriminator_input(torch.sigmoid(out_lab.logits.detach()), feats, w))
    conf_gt = disc(build_discriminator_input(y_lab, feats, w))
    loss = discriminator_loss(conf_pred, conf_gt)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return loss.item()


def build_discriminator(seg: SegNet, init: Checkpoint, disc_config: DiscriminatorConfig,
                        seed: int) -> Discriminator:
    torch.manual_seed(seed)
    if init.disc_state is not None and init.disc_config is not None:
        disc_config = init.disc_config
    disc = Discriminator(seg.config.fused_channels + 1, disc_config)
    if init.disc_state is not None:
        disc.load_state_dict(init.disc_state)
    return disc


def _adversarial_loop(config: TrainingConfig, labeled, unlabeled, init: Checkpoint,
                      disc_config: DiscriminatorConfig, train_discriminator: bool,
                      epoch_callback: EpochCallback | None) -> Checkpoint:
    window = (config.window_lo, config.window_hi)
    xl, yl = volumes_to_tensors(labeled, window)
    xu, _ = volumes_to_tensors(unlabeled, window, labeled=False)

    seg = init.build_segnet()
    disc = build_discriminator(seg, init, disc_config, config.seed)
    opt_s = _sgd(seg, config, config.seg_lr)
    opt_d = _adam(disc, config)

    # labeled batches drive the epoch when present; otherwise the unlabeled set does
    driver = len(xl) if len(xl) else len(xu)
    n_batches = math.ceil(driver / config.batch_size) if driver else 0
    max_iter = config.epochs * n_batches
    use_unl = len(xu) > 0 and (config.lambda_semi != 0 or config.lambda_adv_unlabeled != 0)

    unl_batches: list = []
    unl_round = 0

    def next_unlabeled():
        nonlocal unl_batches, unl_round
        if not unl_batches:
            unl_batches = batch_order(len(xu), config.batch_size, config.seed, unl_round, stream=1)
            unl_round += 1
        return unl_batches.pop(0)

    history, it = [], 0
    for epoch in range(config.epochs):
        seg.train()
        disc.train()
        keys = ("seg_loss", "disc_loss", "semi_loss", "adv_loss") if train_discriminator \
            else ("seg_loss", "semi_loss", "adv_loss")
        sums = dict.fromkeys(keys, 0.0)
        steps = 0
        if len(xl):
            batches = batch_order(len(xl), config.batch_size, config.seed, epoch)
        else:
            batches = [None] * n_batches
        for idx in batches:
            _set_lr(opt_s, poly_lr(config.seg_lr, it, max_iter, config.lr_decay_power))
            _set_lr(opt_d, poly_lr(config.disc_lr, it, max_iter, config.lr_decay_power))
            x_l = y_l = x_u = None
            if idx is not None:
                x_l, y_l = xl[idx], yl[idx]
            if use_unl:
                x_u = xu[next_unlabeled()]
            stats, out_l = segmentation_step(seg, disc, opt_s, config, x_l, y_l, x_u)
            if train_discriminator and out_l is not None:
                stats["disc_loss"] = discriminator_step(disc, opt_d, out_l, y_l)
            for k, v in stats.items():
                sums[k] += v
            steps += 1
            it += 1

        rec = {"epoch": epoch}
        rec.update({k: v / max(steps, 1) for k, v in sums.items()})
        history.append(rec)
        log.info("epoch %d %s", epoch, " ".join(f"{k} {v:.6f}" for k, v in rec.items() if k != "epoch"))
        if epoch_callback:
            epoch_callback(epoch, seg, disc)

    return Checkpoint(
        seg_state=_state_copy(seg), segnet_config=seg.config, config=config,
        epoch=config.epochs, loss_history=history,
        disc_state=_state_copy(disc), disc_config=disc.config,
        init_hash=init.manifest_hash,
    )


def train_semi(config: TrainingConfig, labeled_data, unlabeled_data, init: Checkpoint | None,
               disc_config: DiscriminatorConfig = DiscriminatorConfig(),
               epoch_callback: EpochCallback | None = None) -> Checkpoint:
    """Adversarial semi-supervised phase.

    Per iteration: one segmentation step on (labeled BCE+dice + adversarial)
    plus (unlabeled self-training + adversarial), then one discriminator step
    on the labeled batch only.
    """
    if init is None or init.seg_state is None:
        raise MissingPretrain("train_semi needs a pretrained segmentation checkpoint")
    if not labeled_data:
        raise EmptyDataset("labeled dataset is empty")
    return _adversarial_loop(config, labeled_data, unlabeled_data or [], init, disc_config,
                             train_discriminator=True, epoch_callback=epoch_callback)


def fine_tune(config: TrainingConfig, unlabeled_small, init: Checkpoint | None,
              disc_config: DiscriminatorConfig = DiscriminatorConfig(),
              epoch_callback: EpochCallback | None = None) -> Checkpoint:
    """Unlabeled-only adaptation; the discriminator is frozen."""
    if init is None or init.seg_state is None:
        raise MissingPretrain("fine_tune needs a pretrained checkpoint")
    if not unlabeled_small and config.epochs:
        raise EmptyDataset("fine-tune dataset is empty")
    return _adversarial_loop(config, [], unlabeled_small, init, disc_config,
                             train_discriminator=False, epoch_callback=epoch_callback)


# --------------------------------------------------------------------------- inference

@torch.no_grad()
def predict_slices(model: SegNet, slices: Sequence[np.ndarray], window=DEFAULT_WINDOW,
                   threshold: float = 0.5, batch_size: int = 8) -> list[np.ndarray]:
    """Evaluation-mode prediction of uint8 {0,1} masks for HU slices."""
    model.eval()
    out = []
    for i in range(0, len(slices), batch_size):
        x = torch.from_numpy(np.stack([window_normalize(s, *window) for s in slices[i:i + batch_size]])[:, None])
        probs = torch.sigmoid(model(x).logits)
        out.extend((p[0] >= threshold).to(torch.uint8).numpy() for p in probs)
    return out


def evaluate_dice(model: SegNet, volumes: Sequence[PatientVolume], window=DEFAULT_WINDOW) -> float:
    """Aggregate per-slice dice (see :mod:`pe_advseg.metrics`) over labeled volumes."""
    from .metrics import evaluate_dataset

    pairs = []
    for v in volumes:
        preds = predict_slices(model, v.slices, window)
        pairs.extend(zip(preds, v.masks))
    return evaluate_dataset(pairs).aggregate["dice"]
