"""Heatmap-regression training for landmark (FAN) and AU models."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import subprocess
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
import torch

from . import __version__
from .backbone import ConfigError, ModelBundle, normalise
from .codec import STRIDE, DecodedAU, decode, decode_batch, encode_batch
from .metrics import PredictionTrace
from .synth import FrameSample, read_image
from .topology import AUTopology, LANDMARK_SYMMETRY, load_topology
from .transfer import FROZEN_CORE_MODES, core_checksum

log = logging.getLogger(__name__)

FAN_SIGMA = 1.0


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


class FrozenCoreViolation(RuntimeError):
    pass


@dataclass
class AugmentationConfig:
    enabled: bool = True
    flip_prob: float = 0.5
    rotation: float = 30.0          # degrees; uniform in [-rotation, rotation]
    scale_min: float = 0.8
    scale_max: float = 1.2
    brightness: float = 0.2         # multiplicative jitter amplitudes
    contrast: float = 0.2
    saturation: float = 0.2
    occlusion_prob: float = 0.3
    occlusion_min: float = 0.1      # rectangle side as a fraction of the image side
    occlusion_max: float = 0.3


@dataclass
class TrainConfig:
    optimiser: str = "adam"
    batch_size: int = 48
    weight_decay: float = 1e-6
    momentum: float = 0.9           # Adam beta1
    base_lr: float = 1e-4
    schedule: str = "cosine_restarts"   # or "cosine" (single decay over schedule_period)
    schedule_period: int = 5
    eta_min: float = 0.0
    epochs: int = 20
    max_steps: int | None = None
    seed: int = 0
    sigma0: float = 1.0
    fan_sigma: float = FAN_SIGMA    # landmark-target width in heatmap px
    num_workers: int = 0
    device: str = "cpu"
    input_size: int | None = None
    aug: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        if isinstance(self.aug, dict):
            self.aug = AugmentationConfig(**self.aug)
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0 or (self.max_steps is not None and self.max_steps < 0):
            raise ConfigError(f"epochs/max_steps must be >= 0, got {self.epochs}/{self.max_steps}")
        if not self.base_lr > 0 or self.schedule_period < 1:
            raise ConfigError(f"need base_lr > 0 and schedule_period >= 1, got {self.base_lr}, {self.schedule_period}")
        if not (self.sigma0 > 0 and self.fan_sigma > 0):
            raise ConfigError("heatmap widths must be positive")
        if self.optimiser != "adam":
            raise ConfigError(f"only the Adam optimiser is supported, got {self.optimiser!r}")
        if self.schedule not in ("cosine_restarts", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# --- loss -----------------------------------------------------------------

def heatmap_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-sample summed squared error, averaged over the batch."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return (pred - target).pow(2).flatten(1).sum(dim=1).mean()


# --- schedule -------------------------------------------------------------

def cosine_lr(base_lr: float, epoch: float, period: int = 5, restarts: bool = True,
              eta_min: float = 0.0) -> float:
    """Learning rate at a (fractional) epoch.

    With restarts the cosine wave repeats every ``period`` epochs; without,
    it decays once over ``period`` epochs and then stays at ``eta_min``.
    """
    if restarts:
        t = epoch % period
    else:
        t = min(epoch, period)
    return eta_min + (base_lr - eta_min) * (1 + math.cos(math.pi * t / period)) / 2


# --- augmentation ---------------------------------------------------------

@dataclass
class AugParams:
    flip: bool = False
    angle: float = 0.0
    scale: float = 1.0
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    occlusion: tuple[int, int, int, int] | None = None  # x, y, w, h

    @property
    def is_identity(self) -> bool:
        return (not self.flip and self.angle == 0 and self.scale == 1 and self.brightness == 1
                and self.contrast == 1 and self.saturation == 1 and self.occlusion is None)


def sample_aug(cfg: AugmentationConfig, rng: np.random.Generator, size: tuple[int, int]) -> AugParams:
    if not cfg.enabled:
        return AugParams()
    h, w = size
    p = AugParams(
        flip=bool(rng.random() < cfg.flip_prob),
        angle=float(rng.uniform(-cfg.rotation, cfg.rotation)),
        scale=float(rng.uniform(cfg.scale_min, cfg.scale_max)),
        brightness=float(rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)),
        contrast=float(rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)),
        saturation=float(rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)),
    )
    if rng.random() < cfg.occlusion_prob:
        ow = int(round(w * rng.uniform(cfg.occlusion_min, cfg.occlusion_max)))
        oh = int(round(h * rng.uniform(cfg.occlusion_min, cfg.occlusion_max)))
        p.occlusion = (int(rng.integers(0, w - ow + 1)), int(rng.integers(0, h - oh + 1)), ow, oh)
    return p


def similarity_matrix(angle: float, scale: float, size: tuple[int, int]) -> np.ndarray:
    """2 x 3 rotation+scale about the image centre (pixel-index coordinates)."""
    h, w = size
    return cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), angle, scale)


def apply_aug(sample: FrameSample, p: AugParams, symmetry: Sequence[int] = LANDMARK_SYMMETRY) -> FrameSample:
    """Apply one augmentation draw jointly to image and landmarks; labels unchanged."""
    img = sample.image
    lmk = np.asarray(sample.landmarks, dtype=np.float64)
    h, w = img.shape[:2]
    if p.flip:
        img = img[:, ::-1]
        lmk = lmk.copy()
        lmk[:, 0] = w - 1 - lmk[:, 0]
        lmk = lmk[list(symmetry)]
    if p.angle != 0 or p.scale != 1:
        m = similarity_matrix(p.angle, p.scale, (h, w))
        fill = tuple(float(c) for c in img.reshape(-1, 3).mean(axis=0))
        img = cv2.warpAffine(np.ascontiguousarray(img), m, (w, h), flags=cv2.INTER_LINEAR,
                             borderMode=cv2.BORDER_CONSTANT, borderValue=fill)
        lmk = lmk @ m[:, :2].T + m[:, 2]
    if (p.brightness, p.contrast, p.saturation) != (1, 1, 1):
        x = img.astype(np.float32) * p.brightness
        x = (x - x.mean()) * p.contrast + x.mean()
        grey = x.mean(axis=2, keepdims=True)
        x = grey + (x - grey) * p.saturation
        img = np.clip(x + 0.5, 0, 255).astype(np.uint8)
    if p.occlusion is not None:
        x0, y0, ow, oh = p.occlusion
        img = np.array(img)
        img[y0:y0 + oh, x0:x0 + ow] = img.reshape(-1, 3).mean(axis=0).astype(np.uint8)
    if img is sample.image:
        img = img.copy()
    return FrameSample(np.ascontiguousarray(img), lmk, np.array(sample.label), sample.au_ids, sample.id)


def augment(sample: FrameSample, cfg: AugmentationConfig, rng: np.random.Generator) -> FrameSample:
    return apply_aug(sample, sample_aug(cfg, rng, sample.image.shape[:2]))


# --- data -----------------------------------------------------------------

def resize_sample(sample: FrameSample, size: int) -> FrameSample:
    h, w = sample.image.shape[:2]
    if (h, w) == (size, size):
        return sample
    img = cv2.resize(sample.image, (size, size), interpolation=cv2.INTER_AREA)
    k = np.array([size / w, size / h])
    lmk = (np.asarray(sample.landmarks) + 0.5) * k - 0.5
    return FrameSample(img, lmk, sample.label, sample.au_ids, sample.id)


class FrameDataset(torch.utils.data.Dataset):
    """Augments on access; randomness keyed by (seed, epoch, index)."""

    def __init__(self, samples: Sequence[FrameSample], aug: AugmentationConfig, seed: int = 0,
                 input_size: int | None = None):
        self.samples = [resize_sample(s, input_size) if input_size else s for s in samples]
        self.aug = aug
        self.seed = seed
        self.epoch = 0

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, idx):
        s = self.samples[idx]
        if self.aug.enabled:
            rng = np.random.default_rng([self.seed, self.epoch, idx])
            s = augment(s, self.aug, rng)
        img = torch.from_numpy(np.ascontiguousarray(s.image.transpose(2, 0, 1)))
        return img, torch.from_numpy(s.landmarks), torch.from_numpy(np.asarray(s.label, dtype=np.float64))


def make_targets(landmarks: torch.Tensor, labels: torch.Tensor, map_size: tuple[int, int],
                 kind: str, topology: AUTopology | None = None, sigma0: float = 1.0,
                 fan_sigma: float = FAN_SIGMA) -> torch.Tensor:
    """Regression targets after augmentation; ``kind`` is 'au' or 'landmarks'."""
    lmk = landmarks.to(torch.float64)
    if kind == "landmarks":
        pts = lmk[:, :, None, :]
        amp = torch.ones(lmk.shape[:2], dtype=torch.float64)
        return encode_batch(pts, amp, map_size, sigma0=fan_sigma).float()
    m, mask = topology.cell_matrix()
    pts = torch.einsum("nkl,bld->bnkd", torch.from_numpy(m), lmk)
    return encode_batch(pts, labels.to(torch.float64), map_size, mask=torch.from_numpy(mask),
                        sigma0=sigma0).float()


def dataset_hash(samples: Sequence[FrameSample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.id.encode())
        h.update(np.asarray(s.landmarks, dtype=np.float64).tobytes())
        h.update(np.asarray(s.label, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


def code_identifier() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# --- training -------------------------------------------------------------

def _target_kind(model: ModelBundle) -> str:
    return "landmarks" if model.mode == "fan" else "au"


def train(model: ModelBundle, samples: Sequence[FrameSample], cfg: TrainConfig,
          out_dir=None, topology: AUTopology | None = None) -> tuple[ModelBundle, dict]:
    """Optimise ``model`` in place on ``samples``; returns (model, run manifest).

    FAN models (mode 'fan') regress 68 unit landmark Gaussians; every other
    mode regresses AU heatmaps for the dataset's AU columns.
    """
    kind = _target_kind(model)
    au_ids = tuple(samples[0].au_ids) if samples else ()
    if kind == "au":
        topology = topology or load_topology(au_ids=au_ids)
        if topology.au_ids != au_ids:
            raise ValueError(f"topology AUs {topology.au_ids} differ from dataset AUs {au_ids}")
        expected = len(au_ids)
    else:
        expected = 68
    if model.n_out != expected:
        raise ValueError(f"model has {model.n_out} outputs but {kind} targets need {expected}")
    model.arch.setdefault("au_ids", list(au_ids) if kind == "au" else None)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    size = cfg.input_size or model.arch.get("input_size") or samples[0].image.shape[0]
    model.arch["input_size"] = size
    lr_scale = float(model.meta.get("lr_scale", 1.0))
    manifest = {
        "mode": model.mode,
        "target": kind,
        "config": cfg.to_dict(),
        "weight_decay": cfg.weight_decay,
        "momentum": cfg.momentum,
        "schedule": {"kind": cfg.schedule, "period": cfg.schedule_period},
        "effective_base_lr": cfg.base_lr * lr_scale,
        "seed": cfg.seed,
        "dataset_hash": dataset_hash(samples),
        "n_samples": len(samples),
        "au_ids": list(au_ids),
        "code": code_identifier(),
        "arch": model.arch,
    }
    frozen_before = core_checksum(model.net) if model.mode in FROZEN_CORE_MODES else None
    if cfg.epochs <= 0 or not samples or cfg.max_steps == 0:
        manifest.update(steps=0, final_loss=None)
        _write_manifest(out, manifest)
        return model, manifest

    torch.manual_seed(cfg.seed)
    device = torch.device(cfg.device)
    net = model.net.to(device)
    params = [p for p in net.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.base_lr * lr_scale, betas=(cfg.momentum, 0.999),
                           weight_decay=cfg.weight_decay)
    ds = FrameDataset(samples, cfg.aug, cfg.seed, size)
    map_size = (size // STRIDE, size // STRIDE)
    steps_per_epoch = math.ceil(len(ds) / cfg.batch_size)
    log_fh = open(out / "loss.log", "a") if out is not None else None
    if log_fh is not None and log_fh.tell() == 0:
        log_fh.write("step,epoch,lr,loss\n")
    losses = []
    step = 0
    t0 = time.time()
    try:
        for epoch in range(cfg.epochs):
            ds.epoch = epoch
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(ds)).tolist()
            loader = torch.utils.data.DataLoader(ds, batch_size=cfg.batch_size, sampler=order,
                                                 num_workers=cfg.num_workers, drop_last=False)
            net.train()
            for b, (img, lmk, lab) in enumerate(loader):
                lr = cosine_lr(cfg.base_lr * lr_scale, epoch + b / steps_per_epoch, cfg.schedule_period,
                               cfg.schedule == "cosine_restarts", cfg.eta_min * lr_scale)
                for g in opt.param_groups:
                    g["lr"] = lr
                target = make_targets(lmk, lab, map_size, kind, topology, cfg.sigma0, cfg.fan_sigma).to(device)
                pred = net(normalise(img).to(device))
                loss = heatmap_loss(pred, target)
                value = float(loss.detach())
                if not math.isfinite(value):
                    manifest.update(diverged_at_step=step)
                    _write_manifest(out, manifest)
                    raise TrainingDiverged(step, value)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                losses.append(value)
                if log_fh is not None:
                    log_fh.write(f"{step},{epoch},{lr:.6g},{value:.6g}\n")
                step += 1
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
            log.info("epoch %d: mean loss %.4f (%.0fs)", epoch, np.mean(losses[-(b + 1):]), time.time() - t0)
            if out is not None:
                from .checkpoint import save
                save(model, out / f"epoch{epoch:03d}.pt")
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    net.eval()
    if frozen_before is not None:
        after = core_checksum(model.net)
        if after != frozen_before:
            raise FrozenCoreViolation("frozen FAN conv tensors changed during training")
        model.meta["frozen_checksum"] = after
    manifest.update(steps=step, final_loss=losses[-1] if losses else None, first_loss=losses[0] if losses else None,
                    seconds=round(time.time() - t0, 1))
    model.meta["manifest"] = {k: v for k, v in manifest.items() if k != "arch"}
    model.meta["losses"] = losses
    _write_manifest(out, manifest)
    if out is not None:
        from .checkpoint import save
        save(model, out / "final.pt")
    return model, manifest


def _write_manifest(out: Path | None, manifest: dict) -> None:
    if out is not None:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))


# --- inference ------------------------------------------------------------

def square_crop_resize(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape[:2]
    side = min(h, w)
    y0, x0 = (h - side) // 2, (w - side) // 2
    crop = image[y0:y0 + side, x0:x0 + side]
    if side != size:
        crop = cv2.resize(crop, (size, size), interpolation=cv2.INTER_AREA)
    return crop


@torch.no_grad()
def predict_heatmaps(model: ModelBundle, images: Sequence[np.ndarray], batch_size: int = 32) -> torch.Tensor:
    size = model.arch.get("input_size") or 256
    model.net.eval()
    outs = []
    for i in range(0, len(images), batch_size):
        chunk = np.stack([square_crop_resize(im, size) for im in images[i:i + batch_size]])
        x = normalise(torch.from_numpy(chunk.transpose(0, 3, 1, 2).copy()))
        outs.append(model.net(x))
    return torch.cat(outs)


def infer(model: ModelBundle, image) -> DecodedAU:
    """Crop to a square, resize, forward and decode one frame (no registration)."""
    if isinstance(image, (str, Path)):
        image = read_image(image)
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {image.shape}")
    hm = predict_heatmaps(model, [image])[0].numpy()
    ids = model.arch.get("au_ids") or list(range(model.n_out))
    dec = decode(hm, au_ids=ids)
    # report locations in the caller's image frame
    h, w = image.shape[:2]
    side = min(h, w)
    size = model.arch.get("input_size") or 256
    k = side / size
    dec.location = (dec.location + 0.5) * k - 0.5 + np.array([(w - side) // 2, (h - side) // 2])
    return dec


def predict_trace(model: ModelBundle, samples: Sequence[FrameSample], batch_size: int = 32) -> PredictionTrace:
    ids = tuple(model.arch.get("au_ids") or samples[0].au_ids)
    preds = []
    for i in range(0, len(samples), batch_size):
        hm = predict_heatmaps(model, [s.image for s in samples[i:i + batch_size]], batch_size)
        preds.append(decode_batch(hm)[0].numpy())
    return PredictionTrace(ids, [s.id for s in samples], np.concatenate(preds),
                           np.stack([s.label for s in samples]))
