"""ICC(3,1), MSE and RMSE per AU, plus Table-style reports."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class UndefinedMetric(ValueError):
    """Raised when ICC is undefined (constant ground truth)."""


def _pair(y, yhat, min_len: int) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.size} vs {yhat.size}")
    if y.size < min_len:
        raise ValueError(f"need at least {min_len} values, got {y.size}")
    if np.isnan(y).any() or np.isnan(yhat).any():
        raise ValueError("NaN in metric input")
    return y, yhat


def icc31(y, yhat) -> float:
    """Shrout-Fleiss ICC(3,1): two-way mixed, consistency, single rater.

    Ground truth and prediction are the k = 2 raters; targets are frames.
    """
    y, yhat = _pair(y, yhat, 3)
    if np.ptp(y) == 0:
        raise UndefinedMetric("ICC(3,1) is undefined for constant ground truth")
    x = np.stack([y, yhat], axis=1)
    n, k = x.shape
    grand = x.mean()
    ss_rows = k * ((x.mean(axis=1) - grand) ** 2).sum()
    ss_cols = n * ((x.mean(axis=0) - grand) ** 2).sum()
    ss_err = ((x - grand) ** 2).sum() - ss_rows - ss_cols
    bms = ss_rows / (n - 1)
    ems = ss_err / ((n - 1) * (k - 1))
    denom = bms + (k - 1) * ems
    if denom == 0:
        raise UndefinedMetric("ICC(3,1) is undefined: zero total variance")
    return float((bms - ems) / denom)


def mse(y, yhat) -> float:
    y, yhat = _pair(y, yhat, 1)
    return float(np.mean((y - yhat) ** 2))


def rmse(y, yhat) -> float:
    return math.sqrt(mse(y, yhat))


@dataclass
class PredictionTrace:
    au_ids: tuple[int, ...]
    frame_ids: list[str]
    pred: np.ndarray   # frames x N_aus
    truth: np.ndarray  # frames x N_aus

    def __post_init__(self):
        self.pred = np.asarray(self.pred, dtype=np.float64)
        self.truth = np.asarray(self.truth, dtype=np.float64)
        if self.pred.shape != self.truth.shape or self.pred.ndim != 2:
            raise ValueError(f"prediction {self.pred.shape} and truth {self.truth.shape} must match")
        if self.pred.shape[1] != len(self.au_ids) or len(self.frame_ids) != len(self.pred):
            raise ValueError("trace columns or frame ids do not line up")
        if np.isnan(self.pred).any() or np.isnan(self.truth).any():
            raise ValueError("NaN in prediction trace")

    def column(self, au_id: int) -> tuple[np.ndarray, np.ndarray]:
        try:
            j = self.au_ids.index(au_id)
        except ValueError:
            raise KeyError(f"AU{au_id} is not in the trace") from None
        return self.truth[:, j], self.pred[:, j]

    @classmethod
    def concat(cls, traces: Sequence["PredictionTrace"]) -> "PredictionTrace":
        """Pool folds; metrics on the result are computed on aggregated predictions."""
        ids = traces[0].au_ids
        if any(t.au_ids != ids for t in traces):
            raise ValueError("folds disagree on AU columns")
        return cls(ids, [f for t in traces for f in t.frame_ids],
                   np.concatenate([t.pred for t in traces]), np.concatenate([t.truth for t in traces]))

    def to_csv(self) -> str:
        cols = ["frame"] + [f"pred_au{a}" for a in self.au_ids] + [f"true_au{a}" for a in self.au_ids]
        lines = [",".join(cols)]
        for f, p, t in zip(self.frame_ids, self.pred, self.truth):
            lines.append(",".join([f] + [repr(float(v)) for v in p] + [repr(float(v)) for v in t]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "PredictionTrace":
        rows = [r.split(",") for r in text.strip().splitlines()]
        header = rows[0]
        pred_cols = [i for i, c in enumerate(header) if c.startswith("pred_au")]
        true_cols = [i for i, c in enumerate(header) if c.startswith("true_au")]
        ids = tuple(int(header[i][len("pred_au"):]) for i in pred_cols)
        if ids != tuple(int(header[i][len("true_au"):]) for i in true_cols):
            raise ValueError("pred_au* and true_au* columns differ")
        body = rows[1:]
        return cls(ids, [r[0] for r in body],
                   [[float(r[i]) for i in pred_cols] for r in body],
                   [[float(r[i]) for i in true_cols] for r in body])


@dataclass
class AUScore:
    au_id: int
    icc: float | None
    mse: float

    @property
    def rmse(self) -> float:
        return math.sqrt(self.mse)


@dataclass
class MetricsReport:
    scores: list[AUScore]
    name: str = ""
    notes: list[str] = field(default_factory=list)

    @property
    def avg_icc(self) -> float | None:
        vals = [s.icc for s in self.scores if s.icc is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def avg_mse(self) -> float:
        return float(np.mean([s.mse for s in self.scores]))

    @property
    def avg_rmse(self) -> float:
        return float(np.mean([s.rmse for s in self.scores]))

    def score(self, au_id: int) -> AUScore:
        return next(s for s in self.scores if s.au_id == au_id)

    def to_csv(self) -> str:
        def fmt(v):
            return "NA" if v is None else repr(float(v))

        lines = ["au,icc,mse,rmse"]
        lines += [f"{s.au_id},{fmt(s.icc)},{fmt(s.mse)},{fmt(s.rmse)}" for s in self.scores]
        lines.append(f"avg,{fmt(self.avg_icc)},{fmt(self.avg_mse)},{fmt(self.avg_rmse)}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "per_au": {str(s.au_id): {"icc": s.icc, "mse": s.mse, "rmse": s.rmse} for s in self.scores},
            "average": {"icc": self.avg_icc, "mse": self.avg_mse, "rmse": self.avg_rmse},
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self, error: str = "MSE") -> str:
        """Console layout: AUs as columns, an ICC row group then an error row group."""
        return format_table([self], error=error)


def format_table(reports: Sequence[MetricsReport], error: str = "MSE") -> str:
    au_ids = [s.au_id for s in reports[0].scores]
    name_w = max([len("Method")] + [len(r.name) for r in reports])
    tag_w = max(len("ICC"), len(error)) + 1
    head = f"{'':{tag_w}}{'AU':<{name_w}} " + "".join(f"{a:>7}" for a in au_ids) + f"{'Avg.':>7}"
    hbar = "-" * len(head)
    out = [hbar, head, hbar]

    def cell(v):
        return f"{'NA':>7}" if v is None else f"{v:7.2f}"

    for label, key in (("ICC", "icc"), (error, "err")):
        for k, r in enumerate(reports):
            tag = label if k == 0 else ""
            if key == "icc":
                vals = [s.icc for s in r.scores] + [r.avg_icc]
            elif error == "RMSE":
                vals = [s.rmse for s in r.scores] + [r.avg_rmse]
            else:
                vals = [s.mse for s in r.scores] + [r.avg_mse]
            out.append(f"{tag:<{tag_w}}{r.name:<{name_w}} " + "".join(cell(v) for v in vals))
        out.append(hbar)
    for r in reports:
        out.extend(f"note: {n}" for n in r.notes)
    return "\n".join(out)


def report(trace: PredictionTrace, active_aus: Iterable[int] | None = None, name: str = "") -> MetricsReport:
    if not trace.frame_ids:
        raise ValueError("empty prediction trace")
    active = list(trace.au_ids if active_aus is None else active_aus)
    scores, notes = [], []
    for a in active:
        y, yhat = trace.column(a)
        try:
            icc = icc31(y, yhat)
        except UndefinedMetric:
            icc = None
            notes.append(f"AU{a}: ICC undefined (constant ground truth); excluded from the average")
        scores.append(AUScore(a, icc, mse(y, yhat)))
    return MetricsReport(scores, name=name, notes=notes)
