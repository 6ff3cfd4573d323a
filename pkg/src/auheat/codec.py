"""Intensity-scaled Gaussian heatmaps: encoding and peak decoding.

Each AU channel is the pixel-wise max over that AU's Gaussians. A Gaussian
for intensity ``a`` peaks at ``a`` and has standard deviation ``sigma0 * a``
heatmap pixels, so both height and spread grow with intensity. Values beyond
a 3-sigma box are exactly zero.

Coordinates use pixel-index convention in both spaces. Map pixel ``j``
covers input pixels ``4j .. 4j+3`` and its centre sits at input ``4j + 1.5``;
this keeps horizontal flips of the image and of the map in exact agreement.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

A_MAX = 5.0
STRIDE = 4
SIGMA0 = 1.0
TRUNCATE = 3.0
PRESENCE_THRESHOLD = 0.1


class HeatmapError(ValueError):
    pass


def to_map(coords, stride: int = STRIDE):
    return (coords + 0.5) / stride - 0.5


def to_input(coords, stride: int = STRIDE):
    return (coords + 0.5) * stride - 0.5


def _check_label(label) -> np.ndarray:
    a = np.asarray(label, dtype=np.float64)
    if a.ndim != 1:
        raise HeatmapError(f"label must be a vector, got shape {a.shape}")
    if np.isnan(a).any():
        raise HeatmapError("label contains NaN")
    if (a < 0).any() or (a > A_MAX).any():
        raise HeatmapError(f"intensities must lie in [0, {A_MAX:g}], got {a.tolist()}")
    return a


def _gaussian(h: int, w: int, u: float, v: float, amp: float, sigma0: float) -> np.ndarray:
    sigma = max(sigma0 * amp, 1e-6)  # subnormal amplitudes would underflow sigma**2
    xs = np.arange(w, dtype=np.float64)[None, :] - u
    ys = np.arange(h, dtype=np.float64)[:, None] - v
    g = amp * np.exp(-(xs**2 + ys**2) / (2.0 * sigma**2))
    inside = (np.abs(xs) <= TRUNCATE * sigma) & (np.abs(ys) <= TRUNCATE * sigma)
    return np.where(inside, g, 0.0)


def encode(points: Sequence[np.ndarray], label, map_size: tuple[int, int],
           sigma0: float = SIGMA0, stride: int = STRIDE) -> np.ndarray:
    """Render an N_aus x H_map x W_map float32 target.

    Args:
        points: per AU, an (n_j x 2) array of (x, y) in input pixels; an empty
            array gives a zero channel.
        label: N_aus intensities in [0, 5].
        map_size: (H_map, W_map), normally a quarter of the input size.
    """
    a = _check_label(label)
    if len(points) != len(a):
        raise HeatmapError(f"{len(points)} AU point sets for {len(a)} intensities")
    h, w = map_size
    if h <= 0 or w <= 0:
        raise HeatmapError(f"map size must be positive, got {map_size}")
    out = np.zeros((len(a), h, w), dtype=np.float64)
    for j, (pts, amp) in enumerate(zip(points, a)):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(pts)):
            raise HeatmapError(f"channel {j}: non-finite AU point")
        if amp == 0:
            continue
        for x, y in to_map(pts, stride):
            np.maximum(out[j], _gaussian(h, w, x, y, amp, sigma0), out=out[j])
    return out.astype(np.float32)


def attention_encode(points: Sequence[np.ndarray], map_size: tuple[int, int],
                     sigma0: float = SIGMA0, stride: int = STRIDE) -> np.ndarray:
    """Same rendering at a fixed unit intensity; locates AUs only."""
    ones = [1.0 if len(np.asarray(p).reshape(-1, 2)) else 0.0 for p in points]
    return encode(points, ones, map_size, sigma0, stride)


@dataclass
class DecodedAU:
    au_ids: tuple[int, ...]
    intensity: np.ndarray   # (N_aus,), clamped to [0, 5]
    location: np.ndarray    # (N_aus, 2) input-pixel (x, y) of each channel's peak
    present: np.ndarray     # (N_aus,) bool

    def as_dict(self) -> dict:
        return {
            f"AU{a}": {
                "intensity": float(i),
                "x": float(loc[0]),
                "y": float(loc[1]),
                "present": bool(p),
            }
            for a, i, loc, p in zip(self.au_ids, self.intensity, self.location, self.present)
        }


def decode(stack, threshold: float = PRESENCE_THRESHOLD, stride: int = STRIDE,
           au_ids: Sequence[int] | None = None) -> DecodedAU:
    """Per channel: intensity from the global max, location from the argmax."""
    hm = np.asarray(stack, dtype=np.float64)
    if hm.ndim != 3:
        raise HeatmapError(f"expected an N x H x W stack, got shape {hm.shape}")
    if np.isnan(hm).any():
        raise HeatmapError("heatmap stack contains NaN")
    n, h, w = hm.shape
    flat = hm.reshape(n, -1)
    idx = flat.argmax(axis=1)
    raw = flat[np.arange(n), idx]
    intensity = np.clip(raw, 0.0, A_MAX)
    rows, cols = np.divmod(idx, w)
    location = to_input(np.stack([cols, rows], axis=1).astype(np.float64), stride)
    ids = tuple(au_ids) if au_ids is not None else tuple(range(n))
    return DecodedAU(ids, intensity, location, intensity >= threshold)


# Batched torch paths used inside training and the attention-map model.

def encode_batch(points: torch.Tensor, amplitude: torch.Tensor, map_size: tuple[int, int],
                 mask: torch.Tensor | None = None, sigma0: float = SIGMA0,
                 stride: int = STRIDE) -> torch.Tensor:
    """points: B x N x K x 2 input-pixel coords; amplitude: B x N.

    ``mask`` (N x K or B x N x K) marks which of the K point slots are real.
    Returns B x N x H x W.
    """
    h, w = map_size
    b, n, k, _ = points.shape
    dtype = points.dtype
    u = to_map(points, stride)
    amp = amplitude.to(dtype).view(b, n, 1, 1, 1)
    sigma = (sigma0 * amp).clamp_min(1e-6)
    xs = torch.arange(w, dtype=dtype, device=points.device).view(1, 1, 1, 1, w)
    ys = torch.arange(h, dtype=dtype, device=points.device).view(1, 1, 1, h, 1)
    dx = xs - u[..., 0].view(b, n, k, 1, 1)
    dy = ys - u[..., 1].view(b, n, k, 1, 1)
    g = amp * torch.exp(-(dx**2 + dy**2) / (2.0 * sigma**2))
    inside = (dx.abs() <= TRUNCATE * sigma) & (dy.abs() <= TRUNCATE * sigma) & (amp > 0)
    if mask is not None:
        m = mask.to(torch.bool)
        m = m.view(1, n, k, 1, 1) if m.ndim == 2 else m.view(b, n, k, 1, 1)
        inside = inside & m
    g = torch.where(inside, g, torch.zeros((), dtype=dtype, device=points.device))
    return g.amax(dim=2)


def argmax_points(heatmaps: torch.Tensor, stride: int = STRIDE) -> torch.Tensor:
    """B x C x H x W -> B x C x 2 input-pixel peak coordinates."""
    b, c, h, w = heatmaps.shape
    idx = heatmaps.reshape(b, c, -1).argmax(dim=-1)
    rows = torch.div(idx, w, rounding_mode="floor")
    cols = idx - rows * w
    return to_input(torch.stack([cols, rows], dim=-1).to(heatmaps.dtype), stride)


def decode_batch(heatmaps: torch.Tensor, stride: int = STRIDE) -> tuple[torch.Tensor, torch.Tensor]:
    """B x N x H x W -> (clamped peak intensities B x N, peak locations B x N x 2)."""
    peak = heatmaps.flatten(2).amax(dim=-1).clamp(0.0, A_MAX)
    return peak, argmax_points(heatmaps, stride)


def write_stack(path, stack) -> None:
    """Raw container: b'AUHM', uint32 version, uint32 ndim, uint32 dims, float32 data.

    All integers and floats little-endian; data row-major.
    """
    arr = np.ascontiguousarray(np.asarray(stack, dtype="<f4"))
    header = np.array([1, arr.ndim, *arr.shape], dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(b"AUHM")
        fh.write(header.tobytes())
        fh.write(arr.tobytes())


def read_stack(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != b"AUHM":
            raise HeatmapError(f"{path}: not a heatmap stack file")
        version, ndim = np.frombuffer(fh.read(8), dtype="<u4")
        if version != 1:
            raise HeatmapError(f"{path}: unsupported stack version {version}")
        shape = tuple(int(d) for d in np.frombuffer(fh.read(4 * int(ndim)), dtype="<u4"))
        data = np.frombuffer(fh.read(), dtype="<f4")
    return data.reshape(shape).copy()


def overlay(image: np.ndarray, stack: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend the channel-wise max of ``stack`` (upsampled) over an H x W x 3 uint8 image."""
    import cv2

    h, w = image.shape[:2]
    heat = np.clip(np.asarray(stack, dtype=np.float32).max(axis=0) / A_MAX, 0.0, 1.0)
    heat = cv2.resize(heat, (w, h), interpolation=cv2.INTER_LINEAR)
    colour = cv2.applyColorMap((heat * 255).astype(np.uint8), cv2.COLORMAP_JET)[..., ::-1]
    weight = (alpha * heat)[..., None]
    return (image * (1 - weight) + colour * weight).astype(np.uint8)
