"""Landmark-to-AU placement table and horizontal-flip symmetry."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

N_LANDMARKS = 68

# FERA2015 intensity set; used as the default active list by the synthetic tooling.
DEFAULT_AUS = (6, 10, 12, 14, 17)


def _pairs_to_map(pairs: Iterable[tuple[int, int]]) -> tuple[int, ...]:
    sym = list(range(N_LANDMARKS))
    for a, b in pairs:
        sym[a], sym[b] = b, a
    return tuple(sym)


# Standard 68-point left/right pairing; unlisted indices lie on the midline.
LANDMARK_SYMMETRY = _pairs_to_map(
    [(i, 16 - i) for i in range(8)]                       # jaw
    + [(17 + i, 26 - i) for i in range(5)]                # brows
    + [(31, 35), (32, 34)]                                # nostrils
    + [(36, 45), (37, 44), (38, 43), (39, 42), (40, 47), (41, 46)]  # eyes
    + [(48, 54), (49, 53), (50, 52), (55, 59), (56, 58)]  # outer lip
    + [(60, 64), (61, 63), (65, 67)]                      # inner lip
)


class TopologyError(ValueError):
    pass


class LandmarkError(ValueError):
    """Landmark array is malformed (wrong shape or non-finite)."""


@dataclass(frozen=True)
class AUSpec:
    au_id: int
    left: tuple[int, ...] = ()
    right: tuple[int, ...] = ()
    centre: tuple[int, ...] = ()
    # Set when the centre cell is to be placed as several separate Gaussians.
    centre_groups: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        if not (self.left or self.right or self.centre):
            raise TopologyError(f"AU{self.au_id}: every cell is empty")
        if bool(self.left) != bool(self.right):
            raise TopologyError(f"AU{self.au_id}: left and right must both be set or both empty")
        for i in self.left + self.right + self.centre:
            if not 0 <= i < N_LANDMARKS:
                raise TopologyError(f"AU{self.au_id}: landmark index {i} outside 0..67")

    def cells(self) -> list[tuple[str, tuple[int, ...]]]:
        """Non-empty (tag, indices) cells in left, right, centre order."""
        out = []
        if self.left:
            out.append(("left", self.left))
        if self.right:
            out.append(("right", self.right))
        if self.centre_groups:
            out.extend(("centre", g) for g in self.centre_groups)
        elif self.centre:
            out.append(("centre", self.centre))
        return out

    @property
    def n_points(self) -> int:
        return len(self.cells())


def _parse_cell(text: str) -> tuple[tuple[int, ...], tuple[tuple[int, ...], ...] | None]:
    text = text.strip()
    if text in ("-", ""):
        return (), None
    groups = tuple(tuple(int(v) for v in g.split(",") if v.strip()) for g in text.split("/"))
    flat = tuple(i for g in groups for i in g)
    return flat, (groups if len(groups) > 1 else None)


def parse_table(text: str) -> list[AUSpec]:
    specs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split(";")
        if len(parts) != 4:
            raise TopologyError(f"line {lineno}: expected 'au; left; right; centre', got {raw!r}")
        try:
            au_id = int(parts[0])
            left, lg = _parse_cell(parts[1])
            right, rg = _parse_cell(parts[2])
            centre, cg = _parse_cell(parts[3])
        except ValueError as exc:
            raise TopologyError(f"line {lineno}: {exc}") from None
        if lg or rg:
            raise TopologyError(f"line {lineno}: only the centre cell may be split with '/'")
        specs.append(AUSpec(au_id, left, right, centre, cg))
    return specs


def format_table(specs: Sequence[AUSpec]) -> str:
    def cell(idx, groups=None):
        if groups:
            return "/".join(",".join(map(str, g)) for g in groups)
        return ",".join(map(str, idx)) if idx else "-"

    return "".join(
        f"{s.au_id}; {cell(s.left)}; {cell(s.right)}; {cell(s.centre, s.centre_groups)}\n" for s in specs
    )


@dataclass(frozen=True)
class AUTopology:
    """Ordered AU set; the order is the heatmap channel order everywhere."""

    specs: tuple[AUSpec, ...]
    landmark_symmetry: tuple[int, ...] = LANDMARK_SYMMETRY
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = [s.au_id for s in self.specs]
        if len(set(ids)) != len(ids):
            raise TopologyError(f"duplicate AU ids in {ids}")
        sym = self.landmark_symmetry
        if len(sym) != N_LANDMARKS or any(sym[sym[i]] != i for i in range(N_LANDMARKS)):
            raise TopologyError("landmark_symmetry must be an involution over 0..67")
        object.__setattr__(self, "_index", {a: k for k, a in enumerate(ids)})

    @property
    def au_ids(self) -> tuple[int, ...]:
        return tuple(s.au_id for s in self.specs)

    def __len__(self) -> int:
        return len(self.specs)

    def spec(self, au_id: int) -> AUSpec:
        try:
            return self.specs[self._index[au_id]]
        except KeyError:
            raise KeyError(f"AU{au_id} is not in this topology") from None

    def channel(self, au_id: int) -> int:
        return self._index[au_id]

    def select(self, au_ids: Iterable[int]) -> "AUTopology":
        """Sub-topology with the given AUs, in the given order."""
        return AUTopology(tuple(self.spec(a) for a in au_ids), self.landmark_symmetry)

    def point_symmetry(self, au_id: int) -> list[int | None]:
        """For each cell of ``au_id``, the cell it becomes under a flip.

        ``None`` marks a cell whose mirrored landmark set is not itself a cell
        of the same AU (the flip then moves that point off the table layout).
        """
        cells = [set(idx) for _, idx in self.spec(au_id).cells()]
        out = []
        for c in cells:
            mirrored = {self.landmark_symmetry[i] for i in c}
            out.append(next((k for k, d in enumerate(cells) if d == mirrored), None))
        return out

    def flip_closed(self, au_id: int) -> bool:
        return None not in self.point_symmetry(au_id)

    def max_points(self) -> int:
        return max(s.n_points for s in self.specs)

    def cell_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """Centroid weights ``M`` (N_aus x K x 68) and validity mask (N_aus x K).

        ``M @ landmarks`` gives every AU point at once; rows past an AU's point
        count are zero and masked out.
        """
        k = self.max_points()
        m = np.zeros((len(self), k, N_LANDMARKS))
        mask = np.zeros((len(self), k), dtype=bool)
        for j, s in enumerate(self.specs):
            for c, (_, idx) in enumerate(s.cells()):
                m[j, c, list(idx)] = 1.0 / len(idx)
                mask[j, c] = True
        return m, mask

    def to_text(self) -> str:
        return format_table(self.specs)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def load_topology(path: str | Path | None = None, au_ids: Iterable[int] | None = None) -> AUTopology:
    if path is None:
        text = resources.files("auheat.data").joinpath("au_placement.txt").read_text()
    else:
        text = Path(path).read_text()
    topo = AUTopology(tuple(parse_table(text)))
    return topo.select(au_ids) if au_ids is not None else topo


def builtin_topology() -> AUTopology:
    return load_topology()


def check_landmarks(landmarks) -> np.ndarray:
    arr = np.asarray(landmarks, dtype=np.float64)
    if arr.shape != (N_LANDMARKS, 2):
        raise LandmarkError(f"expected a 68 x 2 landmark array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise LandmarkError("landmarks contain non-finite values")
    return arr


def out_of_bounds(landmarks, width: int, height: int) -> np.ndarray:
    """Boolean mask of landmarks outside the image (allowed, but worth flagging)."""
    arr = check_landmarks(landmarks)
    return (arr[:, 0] < 0) | (arr[:, 0] > width - 1) | (arr[:, 1] < 0) | (arr[:, 1] > height - 1)


def au_points(landmarks, topology: AUTopology) -> list[np.ndarray]:
    """One centroid per non-empty cell; element j is a (n_points_j x 2) array."""
    arr = check_landmarks(landmarks)
    return [
        np.stack([arr[list(idx)].mean(axis=0) for _, idx in s.cells()]) for s in topology.specs
    ]


def flip_remap(landmarks, image_width: int, topology: AUTopology | None = None) -> np.ndarray:
    """Mirror landmarks for a horizontally flipped image of ``image_width`` pixels."""
    arr = check_landmarks(landmarks)
    sym = LANDMARK_SYMMETRY if topology is None else topology.landmark_symmetry
    mirrored = arr.copy()
    mirrored[:, 0] = image_width - 1 - mirrored[:, 0]
    return mirrored[list(sym)]
