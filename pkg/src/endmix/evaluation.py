"""Detection metrics and nonlinearity analysis.

Recall / false-alarm-rate computed from per-(pixel, class) confusion
counts, operating-point meshes over detector parameter grids with their
distance-to-ideal summary, and the nonlinearity score: the angle between
an observed mixture and its best nonnegative linear approximation over the
true endmembers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .sparse import nnls

__all__ = [
    "ConfusionCounts",
    "RocPoint",
    "RocMesh",
    "NsResult",
    "NsRecord",
    "recall_far",
    "build_confusion",
    "roc_mesh",
    "d_roc",
    "nonlinearity_score",
    "bin_by_ns",
]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        for name in ("tp", "fp", "tn", "fn"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 0:
                raise ValueError(f"{name} must be a nonnegative integer")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )


def recall_far(c: ConfusionCounts) -> tuple[float, float]:
    """(Recall, false alarm rate) = (TP/(TP+FN), FP/(FP+TN))."""
    if c.tp + c.fn == 0:
        raise ValueError("recall undefined: no positive ground truth (TP + FN = 0)")
    if c.fp + c.tn == 0:
        raise ValueError("false alarm rate undefined: no negative ground truth (FP + TN = 0)")
    return c.tp / (c.tp + c.fn), c.fp / (c.fp + c.tn)


def build_confusion(
    truth: Mapping[str, frozenset],
    decisions: Mapping[str, frozenset],
    classes: Sequence[str],
) -> tuple[ConfusionCounts, dict[str, ConfusionCounts]]:
    """Tally per-(pixel, class) outcomes.

    ``truth`` and ``decisions`` map pixel ids to class-id sets and must
    cover exactly the same pixels.  Returns the aggregate over all classes
    and a per-class breakdown.
    """
    if set(truth) != set(decisions):
        missing = set(truth) ^ set(decisions)
        raise ValueError(f"pixel ids differ between truth and decisions: {sorted(missing)[:5]}")
    per_class = {}
    for cls in classes:
        tp = fp = tn = fn = 0
        for pid, true_set in truth.items():
            in_truth = cls in true_set
            in_dec = cls in decisions[pid]
            if in_truth and in_dec:
                tp += 1
            elif in_truth:
                fn += 1
            elif in_dec:
                fp += 1
            else:
                tn += 1
        per_class[cls] = ConfusionCounts(tp, fp, tn, fn)
    aggregate = ConfusionCounts()
    for c in per_class.values():
        aggregate = aggregate + c
    return aggregate, per_class


@dataclass(frozen=True)
class RocPoint:
    params: tuple[tuple[str, object], ...]
    recall: float
    far: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.recall <= 1.0 and 0.0 <= self.far <= 1.0):
            raise ValueError("recall and FAR must lie in [0, 1]")
        object.__setattr__(self, "params", tuple(self.params))

    @property
    def params_dict(self) -> dict:
        return dict(self.params)


@dataclass(frozen=True)
class RocMesh:
    """Operating points of one detector family over its parameter grid."""

    points: tuple[RocPoint, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "points", tuple(self.points))

    def __len__(self) -> int:
        return len(self.points)


def roc_mesh(
    evaluations: Iterable[tuple[Mapping[str, object], Mapping[str, frozenset]]],
    truth: Mapping[str, frozenset],
    classes: Sequence[str],
) -> RocMesh:
    """One (Recall, FAR) point per parameter assignment.

    ``evaluations`` yields (parameter assignment, per-pixel decisions)
    pairs; decisions for every assignment are tallied against the same
    ground truth.
    """
    points = []
    for params, decisions in evaluations:
        agg, _ = build_confusion(truth, decisions, classes)
        r, far = recall_far(agg)
        points.append(RocPoint(tuple(sorted(params.items())), r, far))
    if not points:
        raise ValueError("empty parameter grid")
    return RocMesh(tuple(points))


def d_roc(mesh: RocMesh) -> float:
    """Smallest Euclidean distance from mesh points to the ideal corner
    (FAR = 0, Recall = 1).  Lower is better."""
    if not mesh.points:
        raise ValueError("d_roc of an empty mesh")
    return min(
        math.sqrt((1.0 - p.recall) ** 2 + p.far**2) for p in mesh.points
    )


@dataclass(frozen=True)
class NsResult:
    ns_deg: float
    degenerate: bool = False


@dataclass(frozen=True)
class NsRecord:
    pixel_id: str
    ns_deg: float
    matrix_id: str = ""
    degenerate: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.ns_deg <= 180.0:
            raise ValueError("ns_deg must lie in [0, 180]")


def nonlinearity_score(y, W) -> NsResult:
    """Angle (degrees) between ``y`` and its nonnegative projection onto
    the cone spanned by the columns of ``W``.

    The projection coefficients come from nonnegative least squares, whose
    complementarity condition gives y . (W a*) = ||W a*||^2 >= 0, so the
    angle never exceeds 90 degrees.  An all-zero projection (y anti-aligned
    with every column) returns 90 degrees with the degenerate flag set.
    """
    y = np.asarray(getattr(y, "reflectance", y), dtype=float)
    W = np.asarray(W, dtype=float)
    norm_y = float(np.linalg.norm(y))
    if norm_y == 0.0:
        raise ValueError("nonlinearity score undefined for a zero spectrum")
    a = nnls(W, y).values
    proj = W @ a
    norm_p = float(np.linalg.norm(proj))
    if norm_p == 0.0:
        return NsResult(90.0, degenerate=True)
    cos = float(y @ proj) / (norm_y * norm_p)
    cos = min(1.0, max(0.0, cos))
    return NsResult(math.degrees(math.acos(cos)))


def bin_by_ns(
    records: Sequence[NsRecord], edges: Sequence[float]
) -> list[tuple[float, float, list[str]]]:
    """Group pixel ids into half-open score bins [e_i, e_{i+1}).

    The final bin also includes its upper edge (scores top out at 180, and
    an exact hit on the last edge should not fall out of range).  Records
    outside every bin are dropped.
    """
    edges = [float(e) for e in edges]
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("edges must be strictly increasing with at least 2 values")
    groups: list[tuple[float, float, list[str]]] = [
        (lo, hi, []) for lo, hi in zip(edges, edges[1:])
    ]
    last = len(groups) - 1
    for rec in records:
        for i, (lo, hi, ids) in enumerate(groups):
            if lo <= rec.ns_deg < hi or (i == last and rec.ns_deg == hi):
                ids.append(rec.pixel_id)
                break
    return groups
