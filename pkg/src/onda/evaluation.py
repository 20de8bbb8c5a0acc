"""Detection metrics at a false-alarms-per-hour budget, Pareto fronts and analytic cost."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass

import numpy as np

from .model import EmbeddingModel, mac_count, param_count


class NoCompressionError(ValueError):
    pass


@dataclass
class EvalSet:
    positives: np.ndarray
    negatives: np.ndarray
    seconds_per_negative: float = 3.0

    def __post_init__(self):
        if self.seconds_per_negative <= 0:
            raise ValueError("seconds_per_negative must be positive")


@dataclass(frozen=True)
class OperatingPoint:
    threshold: float
    far_h: float
    tpr: float
    feasible: bool = True


@dataclass(frozen=True)
class ParetoPoint:
    model_size: float
    accuracy: float
    provenance: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.model_size) and math.isfinite(self.accuracy)):
            raise ValueError("Pareto point coordinates must be finite")
        if not 0 <= self.accuracy <= 1:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")


def sweep_from_distances(pos_d, neg_d, seconds_per_negative: float = 3.0) -> list[OperatingPoint]:
    """All distinct confusion matrices of the rule "detect if d <= threshold".

    Thresholds are a sentinel below every distance, midpoints between
    consecutive distinct distances, and a sentinel above every distance.
    """
    pos_d = np.sort(np.asarray(pos_d, dtype=float))
    neg_d = np.sort(np.asarray(neg_d, dtype=float))
    if len(pos_d) == 0 or len(neg_d) == 0:
        raise ValueError("sweep needs at least one positive and one negative")
    u = np.unique(np.concatenate([pos_d, neg_d]))
    taus = np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2, [u[-1] + 1.0]])
    tp = np.searchsorted(pos_d, taus, side="right")
    fp = np.searchsorted(neg_d, taus, side="right")
    hours = len(neg_d) * seconds_per_negative / 3600.0
    return [OperatingPoint(float(t), float(f / hours), float(p / len(pos_d)))
            for t, p, f in zip(taus, tp, fp)]


def sweep_operating_points(model: EmbeddingModel, proto, eval_set: EvalSet) -> list[OperatingPoint]:
    from .selflearn import distances
    return sweep_from_distances(distances(model, proto, eval_set.positives),
                                distances(model, proto, eval_set.negatives),
                                eval_set.seconds_per_negative)


def accuracy_at_far(points: list[OperatingPoint], target_far_h: float = 0.5) -> OperatingPoint:
    """Highest-TPR point with far_h <= target (lowest threshold on ties)."""
    if not points:
        raise ValueError("empty sweep")
    best = None
    for p in points:
        if p.far_h <= target_far_h and (best is None or p.tpr > best.tpr
                                        or (p.tpr == best.tpr and p.threshold < best.threshold)):
            best = p
    if best is None:
        return OperatingPoint(-math.inf, 0.0, 0.0, feasible=False)
    return best


def dominates(a: ParetoPoint, b: ParetoPoint) -> bool:
    return (a.model_size <= b.model_size and a.accuracy >= b.accuracy
            and (a.model_size < b.model_size or a.accuracy > b.accuracy))


def pareto_front(points: list[ParetoPoint]) -> list[ParetoPoint]:
    """Non-dominated points sorted by size; exact ties are all kept."""
    pts = sorted(points, key=lambda p: (p.model_size, -p.accuracy, p.provenance))
    front = []
    best_acc = -math.inf
    i = 0
    while i < len(pts):
        # points of equal size: only the most accurate ones can survive
        j = i
        while j < len(pts) and pts[j].model_size == pts[i].model_size:
            j += 1
        top = pts[i].accuracy
        if top > best_acc:
            front += [p for p in pts[i:j] if p.accuracy == top]
            best_acc = top
        i = j
    return front


def compression_at_iso_performance(front: list[ParetoPoint], baseline: ParetoPoint) -> float:
    """baseline size / size of the smallest point at least as accurate as the baseline."""
    if not front:
        raise ValueError("empty front")
    ok = [p for p in front if p.accuracy >= baseline.accuracy]
    if not ok:
        raise NoCompressionError(f"no point reaches accuracy {baseline.accuracy}; no compression achievable")
    return baseline.model_size / min(p.model_size for p in ok)


def cost_report(model: EmbeddingModel, baseline: EmbeddingModel | None = None) -> dict:
    out = {"params": param_count(model), "macs": mac_count(model)}
    if baseline is not None:
        out["param_ratio"] = out["params"] / param_count(baseline)
        out["mac_ratio"] = out["macs"] / mac_count(baseline)
    return out


# Forward + backward of one sample is costed as three forward passes.
TRAIN_MAC_FACTOR = 3


def training_macs(model_macs: int, samples: int) -> int:
    return TRAIN_MAC_FACTOR * model_macs * samples


# ---------------------------------------------------------------- tables

PARETO_COLUMNS = ("run_id", "variant", "arch", "offline_ratio", "online_ratio", "seed",
                  "size", "macs", "accuracy", "far_h", "pareto")


def write_csv(rows: list[dict], columns=PARETO_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def sweep_csv(points: list[OperatingPoint]) -> str:
    return write_csv([asdict(p) for p in points], ("threshold", "far_h", "tpr", "feasible"))
