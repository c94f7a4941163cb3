"""Landmark evaluation metrics: NME variants, failure rate, AUC, CED.

Per-sample NMEs are kept as raw ratios (0.05 means 5%); reports multiply by
100 where a percentage is displayed. FR uses a strict inequality, so samples
exactly at the threshold count as successes. The AUC integral of the CED
step function is normalized by the threshold so a perfect result is 1.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .data import NormSpec
from .errors import NumericsError


def normalization_distance(target: np.ndarray, valid: np.ndarray,
                           spec: NormSpec, box=None) -> float:
    """d_norm for one sample, measured in the same frame as the coordinates."""
    if spec.mode == "box":
        if box is None:
            raise ValueError("box normalization needs the labeled box size")
        w, h = float(box[0]), float(box[1])
        d = float(np.sqrt(w * h))
    else:
        a = np.asarray(spec.indices_a)
        b = np.asarray(spec.indices_b)
        if not (valid[a].all() and valid[b].all()):
            raise NumericsError("normalization landmarks are invalid in this sample")
        d = float(np.linalg.norm(target[a].mean(axis=0) - target[b].mean(axis=0)))
    if not np.isfinite(d) or d <= 0:
        raise NumericsError(f"normalization distance is {d}")
    return d


def nme_per_sample(predicted: np.ndarray, target: np.ndarray,
                   valid: np.ndarray, spec: NormSpec,
                   boxes=None) -> np.ndarray:
    """Raw NME ratios for a batch: mean valid-landmark L2 error / d_norm.

    predicted/target are (B, N, 2) in a shared frame, valid is (B, N);
    boxes supplies per-sample (W, H) for box normalization.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    out = np.empty(predicted.shape[0])
    for i in range(predicted.shape[0]):
        mask = valid[i]
        if not mask.any():
            raise ValueError(f"sample {i} has no valid landmarks")
        err = np.linalg.norm(predicted[i][mask] - target[i][mask], axis=1).mean()
        d = normalization_distance(target[i], valid[i], spec,
                                   None if boxes is None else boxes[i])
        out[i] = err / d
    return out


def fr(nmes, alpha: float) -> float:
    """Failure rate in percent: share of samples with NME strictly above alpha."""
    values = np.asarray(nmes, dtype=np.float64)
    if values.size == 0:
        raise ValueError("failure rate of an empty sample set is undefined")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return 100.0 * float((values > alpha).sum()) / values.size


@dataclass(frozen=True)
class CEDCurve:
    """Cumulative error distribution: f(eps) = fraction of samples <= eps."""

    values: np.ndarray  # sorted ascending

    @classmethod
    def from_values(cls, nmes) -> "CEDCurve":
        values = np.sort(np.asarray(nmes, dtype=np.float64))
        if values.size == 0:
            raise ValueError("CED of an empty sample set is undefined")
        return cls(values)

    def fraction_at(self, eps: float) -> float:
        return float(np.searchsorted(self.values, eps, side="right")) / self.values.size

    def integral(self, alpha: float) -> float:
        """Exact integral of the step function over [0, alpha]."""
        return float(np.clip(alpha - self.values, 0.0, None).sum()) / self.values.size

    def breakpoints(self):
        """(eps, f(eps)) at every sample value, for plotting/export."""
        n = self.values.size
        return [(float(v), float(i + 1) / n) for i, v in enumerate(self.values)]


def auc(curve, alpha: float) -> float:
    """Area under the CED up to alpha, normalized by alpha into [0, 1]."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if not isinstance(curve, CEDCurve):
        curve = CEDCurve.from_values(curve)
    return curve.integral(alpha) / alpha


@dataclass
class MetricReport:
    nme_percent: float
    fr_percent: dict[float, float]
    auc: dict[float, float]
    norm_mode: str
    sample_count: int
    per_sample_nme: list[float] = field(default_factory=list)

    @classmethod
    def compute(cls, nmes, alphas, norm_mode: str) -> "MetricReport":
        values = np.asarray(nmes, dtype=np.float64)
        return cls(
            nme_percent=100.0 * float(values.mean()),
            fr_percent={float(a): fr(values, a) for a in alphas},
            auc={float(a): auc(values, a) for a in alphas},
            norm_mode=norm_mode,
            sample_count=int(values.size),
            per_sample_nme=[float(v) for v in values],
        )

    def recomputed(self) -> "MetricReport":
        """Re-derive all aggregates from the stored per-sample NMEs."""
        return MetricReport.compute(self.per_sample_nme, sorted(self.fr_percent),
                                    self.norm_mode)

    def to_json(self) -> str:
        payload = {
            "nme_percent": self.nme_percent,
            "fr_percent": {repr(a): v for a, v in sorted(self.fr_percent.items())},
            "auc": {repr(a): v for a, v in sorted(self.auc.items())},
            "norm_mode": self.norm_mode,
            "sample_count": self.sample_count,
            "per_sample_nme": self.per_sample_nme,
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        return cls(
            nme_percent=d["nme_percent"],
            fr_percent={float(a): v for a, v in d["fr_percent"].items()},
            auc={float(a): v for a, v in d["auc"].items()},
            norm_mode=d["norm_mode"],
            sample_count=d["sample_count"],
            per_sample_nme=list(d["per_sample_nme"]),
        )


def write_ced_csv(path, curve: CEDCurve) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epsilon", "fraction"])
        for eps, frac in curve.breakpoints():
            writer.writerow([repr(eps), repr(frac)])


def read_ced_csv(path) -> CEDCurve:
    with open(path) as fh:
        rows = list(csv.reader(fh))
    values = [float(r[0]) for r in rows[1:]]
    return CEDCurve.from_values(values)
