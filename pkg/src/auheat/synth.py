"""Procedural schematic faces with exact landmarks and AU labels, plus manifest I/O.

Geometry lives on a canonical 256 x 256 frame. Each AU moves a fixed set of
landmarks along fixed directions by ``STEP`` pixels per intensity level and
draws a local appearance cue whose contrast grows with intensity. Pose
(yaw, roll, scale, shift) is applied afterwards, so landmarks are exact by
construction. Landmarks are always reported in output-image pixels.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np

from .topology import AUTopology, N_LANDMARKS, LANDMARK_SYMMETRY, au_points, load_topology

log = logging.getLogger(__name__)

CANON = 256.0
CX = (CANON - 1) / 2  # template is mirror-symmetric about this column
STEP = 2.5            # canonical pixels per intensity level


def _mirror(i: int, x: float, y: float) -> tuple[int, float, float]:
    return LANDMARK_SYMMETRY[i], 2 * CX - x, y


def _template() -> np.ndarray:
    pts = np.zeros((N_LANDMARKS, 2))
    cy, rx, ry = 118.0, 78.0, 106.0
    for i in range(17):
        t = math.pi - i * math.pi / 16
        pts[i] = (CX + rx * math.cos(t), cy + ry * math.sin(t))
    left = {
        17: (72, 90), 18: (83, 82), 19: (95, 79), 20: (107, 80), 21: (118, 84),
        31: (113, 142), 32: (120, 145),
        36: (79, 103), 37: (88, 97), 38: (99, 97), 39: (108, 103), 40: (99, 108), 41: (88, 108),
        48: (101, 175), 49: (109, 168), 50: (119, 165), 59: (109, 184), 58: (119, 188),
        60: (105, 175), 61: (116, 172), 67: (116, 179),
    }
    for i, (x, y) in left.items():
        pts[i] = (x, y)
        j, mx, my = _mirror(i, x, y)
        pts[j] = (mx, my)
    for i, y in {27: 95, 28: 108, 29: 121, 30: 134, 33: 147, 51: 167, 57: 189, 62: 172, 66: 179}.items():
        pts[i] = (CX, y)
    return pts


TEMPLATE = _template()

# Per-landmark depth used for yaw; nose protrudes, jaw sides recede.
_DEPTH = np.array(
    [40 * math.sqrt(max(0.0, 1 - ((x - CX) / 80.0) ** 2)) for x, _ in TEMPLATE]
)
_DEPTH[27:36] += np.array([6, 12, 18, 24, 10, 13, 15, 13, 10])

# AU -> [(landmark on the image-left side or midline, (dx, dy) direction, weight)].
# Right-side partners are added mirrored. Magnitude per level = STEP * weight.
_AU_MOTION: dict[int, list[tuple[int, tuple[float, float], float]]] = {
    1: [(21, (0, -1), 1.0), (20, (0, -1), 0.6), (19, (0, -1), 0.3)],
    2: [(17, (0, -1), 1.0), (18, (0, -1), 1.0), (19, (0, -1), 0.4)],
    4: [(21, (0.45, 0.9), 1.0), (20, (0.3, 1.0), 0.6)],
    5: [(37, (0, -1), 1.0), (38, (0, -1), 1.0)],
    6: [(40, (0, -1), 0.8), (41, (0, -1), 0.8), (1, (0, -1), 0.4)],
    9: [(31, (0, -1), 1.0), (32, (0, -1), 0.8), (29, (0, -1), 0.6), (30, (0, -1), 0.6), (33, (0, -1), 0.6)],
    10: [(49, (0, -1), 1.0), (50, (0, -1), 1.0), (51, (0, -1), 1.0), (31, (0, -1), 0.3)],
    12: [(48, (-0.6, -0.8), 1.0)],
    14: [(48, (-1, 0), 0.6), (60, (-1, 0), 1.0)],
    15: [(48, (0, 1), 1.0), (59, (0, 1), 0.4)],
    17: [(57, (0, -1), 1.0), (8, (0, -1), 1.0), (7, (0, -1), 0.5), (58, (0, -1), 0.6)],
    20: [(48, (-0.95, 0.3), 1.0), (51, (0, 1), 0.3), (57, (0, -1), 0.3)],
    25: [(61, (0, -1), 0.6), (62, (0, -1), 0.6), (67, (0, 1), 1.0), (66, (0, 1), 1.0)],
    26: [(8, (0, 1), 1.0), (7, (0, 1), 0.8), (6, (0, 1), 0.6), (5, (0, 1), 0.4),
         (57, (0, 1), 1.0), (58, (0, 1), 1.0), (59, (0, 1), 1.0), (66, (0, 1), 1.0), (67, (0, 1), 1.0)],
}


def _motion_field(au: int) -> np.ndarray:
    """68 x 2 displacement per intensity level for one AU (canonical pixels)."""
    d = np.zeros((N_LANDMARKS, 2))
    for i, (dx, dy), w in _AU_MOTION[au]:
        n = math.hypot(dx, dy)
        d[i] = (STEP * w * dx / n, STEP * w * dy / n)
        j = LANDMARK_SYMMETRY[i]
        if j != i:
            d[j] = (-d[i, 0], d[i, 1])
    return d


MOTION = {au: _motion_field(au) for au in _AU_MOTION}


def deformation_matrix(au_ids: Sequence[int]) -> np.ndarray:
    """136 x N_aus linear map from an intensity vector to landmark offsets."""
    return np.stack([MOTION[a].ravel() for a in au_ids], axis=1)


@dataclass
class Identity:
    face_sx: float = 1.0
    face_sy: float = 1.0
    eye_dy: float = 0.0
    brow_dy: float = 0.0
    mouth_dy: float = 0.0
    mouth_w: float = 1.0
    skin: tuple[int, int, int] = (224, 182, 150)
    hair: tuple[int, int, int] = (70, 50, 35)
    background: tuple[int, int, int] = (90, 110, 130)

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "Identity":
        tone = rng.uniform(0.55, 1.0)
        skin = tuple(int(c) for c in np.clip(np.array([235, 190, 160]) * tone + rng.normal(0, 6, 3), 40, 250))
        hair = tuple(int(c) for c in rng.uniform(15, 110, 3))
        bg = tuple(int(c) for c in rng.uniform(30, 220, 3))
        return cls(
            face_sx=rng.uniform(0.92, 1.08), face_sy=rng.uniform(0.94, 1.06),
            eye_dy=rng.uniform(-4, 4), brow_dy=rng.uniform(-4, 3), mouth_dy=rng.uniform(-5, 5),
            mouth_w=rng.uniform(0.9, 1.1), skin=skin, hair=hair, background=bg,
        )

    def neutral(self) -> np.ndarray:
        pts = TEMPLATE.copy()
        pts[17:27, 1] += self.brow_dy
        pts[36:48, 1] += self.eye_dy
        mouth = slice(48, 68)
        pts[mouth, 1] += self.mouth_dy
        pts[mouth, 0] = CX + (pts[mouth, 0] - CX) * self.mouth_w
        pts[:, 0] = CX + (pts[:, 0] - CX) * self.face_sx
        pts[:, 1] = 128 + (pts[:, 1] - 128) * self.face_sy
        return pts


@dataclass
class SynthFaceParams:
    au: dict[int, float]
    identity: Identity = field(default_factory=Identity)
    yaw: float = 0.0
    roll: float = 0.0
    scale: float = 1.0
    shift: tuple[float, float] = (0.0, 0.0)
    size: int = 256
    noise: float = 3.0

    def __post_init__(self):
        for a, v in self.au.items():
            if a not in MOTION:
                raise ValueError(f"AU{a} has no synthetic deformation")
            if not 0 <= v <= 5 or math.isnan(v):
                raise ValueError(f"AU{a} intensity {v} outside [0, 5]")


@dataclass
class FrameSample:
    """One frame. ``image`` is H x W x 3 uint8 RGB; landmarks are (x, y) pixels."""

    image: np.ndarray
    landmarks: np.ndarray
    label: np.ndarray
    au_ids: tuple[int, ...]
    id: str = ""

    def __eq__(self, other):
        return (
            isinstance(other, FrameSample)
            and self.au_ids == other.au_ids
            and self.id == other.id
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.landmarks, other.landmarks)
            and np.array_equal(self.label, other.label)
        )


def canonical_landmarks(params: SynthFaceParams) -> np.ndarray:
    """Deformed landmarks in the canonical frame, before pose."""
    pts = params.identity.neutral()
    for a, v in params.au.items():
        if v:
            pts = pts + v * MOTION[a]
    return pts


def pose_landmarks(pts: np.ndarray, params: SynthFaceParams) -> np.ndarray:
    """Yaw (depth-aware), roll, scale and shift, then map to output pixels."""
    yaw, roll = math.radians(params.yaw), math.radians(params.roll)
    out = pts.copy()
    out[:, 0] = CX + (pts[:, 0] - CX) * math.cos(yaw) + _DEPTH * math.sin(yaw)
    c, s = math.cos(roll), math.sin(roll)
    centre = np.array([CX, 128.0])
    rel = (out - centre) * params.scale
    out = centre + rel @ np.array([[c, s], [-s, c]]) + np.asarray(params.shift)
    k = params.size / CANON
    return (out + 0.5) * k - 0.5


def _poly(pts: np.ndarray) -> np.ndarray:
    return np.round(pts * 16).astype(np.int32).reshape(-1, 1, 2)


def _draw_cues(img, lmk, params: SynthFaceParams, topo_cache: dict, px: float) -> None:
    """Local intensity-dependent marks at each AU's table locations."""
    skin = np.array(params.identity.skin, dtype=np.float64)
    dark = tuple(int(c) for c in skin * 0.35)
    for au, a in params.au.items():
        if a <= 0:
            continue
        overlay = img.copy()
        pts = au_points(lmk, topo_cache[au])[0]
        r = max(1.0, (2.0 + 1.2 * a) * px)
        thick = max(1, int(round((1 + 0.5 * a) * px)))
        for x, y in pts:
            c = (int(round(x * 16)), int(round(y * 16)))
            if au in (1, 4):
                for dy in (-3, -6) if au == 1 else (0,):
                    off = int(round(dy * 4 * px * 16))
                    if au == 1:
                        cv2.line(overlay, (c[0] - int(r * 24), c[1] + off), (c[0] + int(r * 24), c[1] + off),
                                 dark, thick, cv2.LINE_AA, 4)
                    else:
                        cv2.line(overlay, (c[0], c[1] - int(r * 16)), (c[0], c[1] + int(r * 8)),
                                 dark, thick, cv2.LINE_AA, 4)
            elif au in (6, 26):
                cv2.ellipse(overlay, c, (int(r * 28), int(r * 16)), 0, 0, 360, dark, -1, cv2.LINE_AA, 4)
            elif au in (12, 20):
                cv2.ellipse(overlay, c, (int(r * 24), int(r * 24)), 0, -70, 70 if au == 12 else 20,
                            dark, thick, cv2.LINE_AA, 4)
            elif au in (14, 17):
                cv2.circle(overlay, c, int(r * 12), dark, -1, cv2.LINE_AA, 4)
            elif au == 15:
                cv2.line(overlay, c, (c[0], c[1] + int(r * 32)), dark, thick, cv2.LINE_AA, 4)
            else:  # 2, 5, 9, 10, 25
                cv2.circle(overlay, c, int(r * 20), dark, thick, cv2.LINE_AA, 4)
        alpha = 0.12 + 0.16 * a
        cv2.addWeighted(overlay, alpha, img, 1 - alpha, 0, dst=img)


_CUE_TOPO: dict[int, AUTopology] = {}


def _cue_topology(au: int) -> AUTopology:
    if au not in _CUE_TOPO:
        _CUE_TOPO[au] = load_topology(au_ids=[au])
    return _CUE_TOPO[au]


def render(params: SynthFaceParams, lmk: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = params.size
    px = n / CANON
    ident = params.identity
    img = np.empty((n, n, 3), dtype=np.uint8)
    yy = np.linspace(0.85, 1.1, n)[:, None, None]
    img[:] = np.clip(np.array(ident.background)[None, None, :] * yy, 0, 255).astype(np.uint8)
    aa = cv2.LINE_AA
    sh = 4
    # face: jaw contour closed over a forehead arc
    jaw = lmk[0:17]
    top_c = (lmk[0] + lmk[16]) / 2
    half_w = np.linalg.norm(lmk[16] - lmk[0]) / 2
    ang = math.atan2(lmk[16, 1] - lmk[0, 1], lmk[16, 0] - lmk[0, 0])
    arc = np.array([
        top_c + half_w * np.array([math.cos(ang + t), math.sin(ang + t)]) * np.array([1.0, 0.75])
        for t in np.linspace(0, -math.pi, 15)
    ])
    face = np.concatenate([jaw, arc[1:-1]])
    cv2.fillPoly(img, [_poly(face)], ident.skin, aa, sh)
    cv2.polylines(img, [_poly(jaw)], False, tuple(int(c * 0.7) for c in ident.skin), max(1, int(2 * px)), aa, sh)
    cues = {a: _cue_topology(a) for a in params.au}
    _draw_cues(img, lmk, params, cues, px)
    # eyes
    for sl in (slice(36, 42), slice(42, 48)):
        eye = lmk[sl]
        cv2.fillPoly(img, [_poly(eye)], (245, 245, 240), aa, sh)
        c = eye.mean(axis=0)
        r = int(round(0.33 * np.linalg.norm(eye[3] - eye[0]) * 16))
        cv2.circle(img, (int(c[0] * 16), int(c[1] * 16)), r, (40, 30, 25), -1, aa, sh)
        cv2.polylines(img, [_poly(eye)], True, (30, 20, 20), max(1, int(1.5 * px)), aa, sh)
    # brows
    for sl in (slice(17, 22), slice(22, 27)):
        cv2.polylines(img, [_poly(lmk[sl])], False, ident.hair, max(1, int(4 * px)), aa, sh)
    # nose
    nose_c = tuple(int(c * 0.6) for c in ident.skin)
    cv2.polylines(img, [_poly(lmk[27:31])], False, nose_c, max(1, int(2 * px)), aa, sh)
    cv2.polylines(img, [_poly(lmk[31:36])], False, nose_c, max(1, int(2 * px)), aa, sh)
    # mouth: outer lips then the opening between inner lips
    cv2.fillPoly(img, [_poly(lmk[48:60])], (170, 60, 70), aa, sh)
    cv2.fillPoly(img, [_poly(lmk[60:68])], (50, 15, 20), aa, sh)
    cv2.polylines(img, [_poly(lmk[48:60])], True, (110, 30, 40), max(1, int(1.5 * px)), aa, sh)
    if params.noise > 0:
        noisy = img.astype(np.float64) + rng.normal(0.0, params.noise, img.shape)
        img = np.clip(noisy, 0, 255).astype(np.uint8)
    return img


def synth_frame(params: SynthFaceParams, rng: np.random.Generator | int = 0,
                au_ids: Sequence[int] | None = None, frame_id: str = "") -> FrameSample:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    ids = tuple(au_ids) if au_ids is not None else tuple(sorted(params.au))
    pts = pose_landmarks(canonical_landmarks(params), params)
    img = render(params, pts, rng)
    label = np.array([params.au.get(a, 0.0) for a in ids], dtype=np.float64)
    return FrameSample(img, pts, label, ids, frame_id)


def sample_intensities(rng: np.random.Generator, n_aus: int, zero_prob: float = 0.5) -> np.ndarray:
    """Integer levels: exact zero with ``zero_prob``, else uniform over 1..5."""
    levels = rng.integers(1, 6, size=n_aus)
    return np.where(rng.random(n_aus) < zero_prob, 0, levels).astype(np.float64)


def _split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    counts = [int(round(n * f)) for f in fractions[:-1]]
    counts.append(n - sum(counts))
    return counts


SPLITS = ("train", "val", "test")


def synth_samples(n_frames: int, au_ids: Sequence[int], seed: int = 0, size: int = 256,
                  yaw_range: float = 40.0, roll_range: float = 10.0, zero_prob: float = 0.5,
                  fractions: Sequence[float] = (0.7, 0.15, 0.15),
                  frames_per_identity: int = 8) -> list[tuple[str, FrameSample]]:
    """(split, sample) pairs; identities never cross splits.

    Each frame's randomness derives from (seed, frame index) only.
    """
    au_ids = tuple(au_ids)
    out = []
    index = 0
    id_base = 0
    for split, count in zip(SPLITS, _split_counts(n_frames, fractions)):
        n_ids = max(1, math.ceil(count / frames_per_identity))
        for k in range(count):
            rng = np.random.default_rng([seed, 2, index])
            ident_id = id_base + int(rng.integers(n_ids))
            ident = Identity.sample(np.random.default_rng([seed, 1, ident_id]))
            levels = sample_intensities(rng, len(au_ids), zero_prob)
            params = SynthFaceParams(
                au=dict(zip(au_ids, levels.tolist())), identity=ident,
                yaw=float(rng.uniform(-yaw_range, yaw_range)),
                roll=float(rng.uniform(-roll_range, roll_range)),
                scale=float(rng.uniform(0.95, 1.05)),
                shift=(float(rng.uniform(-4, 4)), float(rng.uniform(-4, 4))),
                size=size,
            )
            out.append((split, synth_frame(params, rng, au_ids, f"{split}_{index:06d}_id{ident_id}")))
            index += 1
        id_base += n_ids
    return out


# --- manifests ------------------------------------------------------------

@dataclass
class DatasetManifest:
    path: Path
    au_ids: tuple[int, ...]
    rows: list[dict]

    def split(self, name: str) -> list[dict]:
        return [r for r in self.rows if r.get("split", "") == name]


def write_landmarks(path, landmarks) -> None:
    with open(path, "w") as fh:
        for x, y in np.asarray(landmarks, dtype=np.float64):
            fh.write(f"{float(x)!r} {float(y)!r}\n")


def read_landmarks(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'x y', got {line.strip()!r}")
            rows.append((float(parts[0]), float(parts[1])))
    arr = np.array(rows, dtype=np.float64)
    if arr.shape != (N_LANDMARKS, 2):
        raise ValueError(f"{path}: expected 68 landmark lines, got {len(rows)}")
    return arr


def write_image(path, image: np.ndarray) -> None:
    if not cv2.imwrite(str(path), cv2.cvtColor(image, cv2.COLOR_RGB2BGR)):
        raise OSError(f"could not write {path}")


def read_image(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise OSError(f"unreadable image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def synth_dataset(n_frames: int, au_ids: Sequence[int], seed: int, out_dir, **kwargs) -> DatasetManifest:
    """Render, write PNGs + landmark files + ``manifest.csv``, return the manifest."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "landmarks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write to {out}: {exc}") from exc
    au_ids = tuple(au_ids)
    rows = []
    for split, s in synth_samples(n_frames, au_ids, seed, **kwargs):
        img_rel, lmk_rel = f"images/{s.id}.png", f"landmarks/{s.id}.txt"
        write_image(out / img_rel, s.image)
        write_landmarks(out / lmk_rel, s.landmarks)
        row = {"frame_path": img_rel, "lmk_path": lmk_rel, "split": split}
        row.update({f"au{a}": repr(float(v)) for a, v in zip(au_ids, s.label)})
        rows.append(row)
    path = out / "manifest.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["frame_path", "lmk_path", "split"] + [f"au{a}" for a in au_ids])
        w.writeheader()
        w.writerows(rows)
    return DatasetManifest(path, au_ids, rows)


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in ("frame_path", "lmk_path"):
            if col not in header:
                raise ValueError(f"{path}: missing column {col!r}")
        au_cols = [c for c in header if c.lower().startswith("au")]
        try:
            au_ids = tuple(int(c[2:]) for c in au_cols)
        except ValueError:
            raise ValueError(f"{path}: AU columns must be named au<id>, got {au_cols}") from None
        rows = list(reader)
    return DatasetManifest(path, au_ids, rows)


@dataclass
class LoadStats:
    loaded: int = 0
    skipped: int = 0
    clipped: int = 0


def load_real(manifest_path, split: str | None = None) -> tuple[list[FrameSample], LoadStats]:
    """Load frames listed in a manifest (``frame_path,lmk_path,au<id>...``).

    Out-of-range labels are clipped to [0, 5] with a warning; frames whose
    landmark file is missing are skipped and counted. A missing image or a
    malformed row raises with its line number.
    """
    man = read_manifest(manifest_path)
    root = man.path.parent
    stats = LoadStats()
    samples = []
    for lineno, row in enumerate(man.rows, 2):
        if split is not None and row.get("split", "") != split:
            continue
        try:
            label = np.array([float(row[f"au{a}"]) for a in man.au_ids], dtype=np.float64)
        except (TypeError, ValueError):
            raise ValueError(f"{man.path}:{lineno}: malformed AU labels") from None
        if np.isnan(label).any():
            raise ValueError(f"{man.path}:{lineno}: NaN label")
        if (label < 0).any() or (label > 5).any():
            log.warning("%s:%d: label outside [0, 5] clipped", man.path, lineno)
            stats.clipped += 1
            label = np.clip(label, 0, 5)
        lmk_path = root / row["lmk_path"]
        if not lmk_path.exists():
            stats.skipped += 1
            continue
        img_path = root / row["frame_path"]
        if not img_path.exists():
            raise FileNotFoundError(f"{man.path}:{lineno}: image {img_path} does not exist")
        try:
            lmk = read_landmarks(lmk_path)
        except ValueError as exc:
            raise ValueError(f"{man.path}:{lineno}: {exc}") from None
        frame_id = Path(row["frame_path"]).stem
        samples.append(FrameSample(read_image(img_path), lmk, label, man.au_ids, frame_id))
        stats.loaded += 1
    return samples, stats
