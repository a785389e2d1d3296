"""Per-class endmember detectors over binary wavelet-domain feature labels.

The pipeline: augment the training library with multiplicative attenuation,
label every sample's wavelet coefficients Small/Large, then per class train
a one-vs-rest detector in three stages:

1. drop features whose empirical association with the class is not strictly
   positive (sign of the 2x2 joint determinant),
2. greedily select features by conditional mutual information with a
   pairwise-min score,
3. fit a Bernoulli naive Bayes on the selected features.

Detection compares the positive and negative log posteriors; ties are
negative, and a sample positive for no detector is "unknown".
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .nhmc import FeatureLabelMatrix, NhmcModel, label_features
from .spectral import SpectralLibrary, Spectrum
from .wavelet import uwt

__all__ = [
    "FeatureDataset",
    "ErrorMatrix",
    "DetectorModel",
    "DetectorBank",
    "Detection",
    "DetectionReport",
    "augment_library",
    "build_feature_dataset",
    "eliminate_negative_features",
    "select_features_cmi",
    "train_naive_bayes",
    "train_detector_bank",
    "detect",
    "feature_report",
]

# add-alpha smoothing for naive Bayes probability estimates
NB_ALPHA = 0.5

# scores at or below this are treated as zero when stopping the greedy search
CMI_STOP_TOL = 1e-12


@dataclass(frozen=True)
class FeatureDataset:
    """Binary design matrix ``x`` (samples x features) with 0/1 targets ``t``."""

    x: np.ndarray
    t: np.ndarray
    n_scales: int
    n_channels: int

    def __post_init__(self) -> None:
        x = np.asarray(self.x)
        t = np.asarray(self.t)
        if x.ndim != 2 or t.ndim != 1 or x.shape[0] != t.size:
            raise ValueError("x must be (n_samples, n_features) aligned with t")
        if x.size and not np.isin(x, (0, 1)).all():
            raise ValueError("features must be binary")
        if t.size and not np.isin(t, (0, 1)).all():
            raise ValueError("targets must be binary")
        if x.shape[1] != self.n_scales * self.n_channels:
            raise ValueError("n_scales * n_channels must equal the feature count")
        object.__setattr__(self, "x", x.astype(np.uint8))
        object.__setattr__(self, "t", t.astype(np.uint8))

    @property
    def n_samples(self) -> int:
        return int(self.t.size)

    @property
    def n_features(self) -> int:
        return int(self.x.shape[1])


@dataclass(frozen=True)
class ErrorMatrix:
    """Smoothed 2x2 joint distribution of one binary feature and the target.

    ``joint[x][t]`` estimates p(x, t).  The determinant
    ``p(0,0) p(1,1) - p(0,1) p(1,0)`` equals the covariance of the two
    binary variables under the (smoothed) joint, so its sign is the sign of
    their correlation.
    """

    joint: np.ndarray
    alpha: float = 0.0

    def __post_init__(self) -> None:
        joint = np.asarray(self.joint, dtype=float)
        if joint.shape != (2, 2):
            raise ValueError("joint must be 2x2")
        if np.any(joint < 0) or abs(float(joint.sum()) - 1.0) > 1e-12:
            raise ValueError("joint must be a distribution")
        object.__setattr__(self, "joint", joint)

    @classmethod
    def from_counts(cls, counts: np.ndarray, alpha: float = 0.0) -> "ErrorMatrix":
        counts = np.asarray(counts, dtype=float)
        if counts.shape != (2, 2) or np.any(counts < 0):
            raise ValueError("counts must be a nonnegative 2x2 table")
        total = counts.sum() + 4.0 * alpha
        if total <= 0:
            raise ValueError("empty count table")
        return cls((counts + alpha) / total, alpha=alpha)

    @property
    def det(self) -> float:
        j = self.joint
        return float(j[0, 0] * j[1, 1] - j[0, 1] * j[1, 0])


@dataclass(frozen=True)
class DetectorModel:
    """One-vs-rest Bernoulli naive Bayes over an ordered feature subset."""

    class_id: str
    selected: np.ndarray
    prob_pos: np.ndarray  # p(x_v = 1 | t = 1), per selected feature
    prob_neg: np.ndarray  # p(x_v = 1 | t = 0)
    log_prior_pos: float
    log_prior_neg: float

    def __post_init__(self) -> None:
        sel = np.asarray(self.selected, dtype=int)
        pp = np.asarray(self.prob_pos, dtype=float)
        pn = np.asarray(self.prob_neg, dtype=float)
        if sel.ndim != 1 or pp.shape != sel.shape or pn.shape != sel.shape:
            raise ValueError("selected, prob_pos and prob_neg must be aligned 1-D arrays")
        if len(set(sel.tolist())) != sel.size:
            raise ValueError("selected feature indices must be distinct")
        for p in (pp, pn):
            if p.size and (np.any(p <= 0) or np.any(p >= 1)):
                raise ValueError("stored probabilities must lie strictly inside (0, 1)")
        object.__setattr__(self, "selected", sel)
        object.__setattr__(self, "prob_pos", pp)
        object.__setattr__(self, "prob_neg", pn)

    @property
    def n_features(self) -> int:
        return int(self.selected.size)

    def margins_by_prefix(self, flat_labels: np.ndarray) -> np.ndarray:
        """Log-posterior margins using the first ``j`` selected features.

        ``flat_labels`` is ``(n_features_total,)`` or ``(n, n_features_total)``.
        Returns ``(n_features,)`` or ``(n, n_features)`` cumulative margins.
        """
        x = np.atleast_2d(np.asarray(flat_labels))[:, self.selected].astype(float)
        active = np.log(self.prob_pos) - np.log(self.prob_neg)
        inactive = np.log1p(-self.prob_pos) - np.log1p(-self.prob_neg)
        terms = x * active + (1.0 - x) * inactive
        out = np.cumsum(terms, axis=1) + (self.log_prior_pos - self.log_prior_neg)
        if np.asarray(flat_labels).ndim == 1:
            return out[0]
        return out

    def margin_batch(self, flat_labels: np.ndarray) -> np.ndarray:
        """Full margin (all selected features) for a batch of label rows."""
        prior = self.log_prior_pos - self.log_prior_neg
        x = np.atleast_2d(np.asarray(flat_labels))
        if self.n_features == 0:
            return np.full(x.shape[0], prior)
        x = x[:, self.selected].astype(float)
        active = np.log(self.prob_pos) - np.log(self.prob_neg)
        inactive = np.log1p(-self.prob_pos) - np.log1p(-self.prob_neg)
        return x @ (active - inactive) + inactive.sum() + prior

    def margin(self, flat_labels: np.ndarray) -> float:
        if self.n_features == 0:
            return float(self.log_prior_pos - self.log_prior_neg)
        return float(self.margin_batch(flat_labels)[0])


@dataclass(frozen=True)
class DetectorBank:
    """One detector per library class plus the shared labelling model."""

    detectors: tuple[DetectorModel, ...]
    nhmc: NhmcModel
    attenuation_grid: tuple[float, ...]
    wavelengths: np.ndarray

    @property
    def classes(self) -> tuple[str, ...]:
        return tuple(d.class_id for d in self.detectors)


@dataclass(frozen=True)
class Detection:
    decision: bool
    margin: float


@dataclass(frozen=True)
class DetectionReport:
    per_class: dict[str, Detection]

    @property
    def unknown(self) -> bool:
        return not any(d.decision for d in self.per_class.values())

    @property
    def detected(self) -> frozenset[str]:
        return frozenset(c for c, d in self.per_class.items() if d.decision)


def augment_library(lib: SpectralLibrary, grid: Sequence[float]) -> SpectralLibrary:
    """Scale every sample by every attenuation factor in ``grid``.

    Factors must lie in (0, 1].  Output keeps sample order (factors vary
    fastest), inherits labels and geometry, and with ``grid == [1.0]`` it
    reproduces the input exactly.
    """
    grid = [float(g) for g in grid]
    if not grid:
        raise ValueError("attenuation grid must not be empty")
    for g in grid:
        if not (0.0 < g <= 1.0):
            raise ValueError(f"attenuation factor {g} outside (0, 1]")
    samples: list[Spectrum] = []
    ids: list[str] = []
    for sid, s in zip(lib.sample_ids, lib.samples):
        for g in grid:
            r = s.reflectance if g == 1.0 else s.reflectance * g
            samples.append(
                Spectrum(s.wavelengths, r, class_label=s.class_label, geometry=s.geometry)
            )
            ids.append(sid if len(grid) == 1 and g == 1.0 else f"{sid}_a{g:g}")
    return SpectralLibrary(samples, ids)


def build_feature_dataset(
    labelled: Sequence[tuple[str, FeatureLabelMatrix]], target_class: str
) -> FeatureDataset:
    """Flatten label matrices into a one-vs-rest dataset for ``target_class``."""
    if not labelled:
        raise ValueError("no labelled samples given")
    n_scales = labelled[0][1].n_scales
    n_channels = labelled[0][1].n_channels
    rows = []
    targets = []
    for cls, mat in labelled:
        if mat.n_scales != n_scales or mat.n_channels != n_channels:
            raise ValueError("label matrices must share one shape")
        rows.append(mat.flatten())
        targets.append(1 if cls == target_class else 0)
    t = np.asarray(targets, dtype=np.uint8)
    if t.all() or not t.any():
        raise ValueError(
            f"need both positive and negative samples for class {target_class!r}"
        )
    return FeatureDataset(np.stack(rows), t, n_scales=n_scales, n_channels=n_channels)


def _joint_counts(ds: FeatureDataset) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-feature 2x2 counts: returns (c11, c10, c01, c00) with c[x][t]."""
    x = ds.x.astype(np.float64)
    t = ds.t.astype(np.float64)
    c11 = x.T @ t
    c10 = x.T @ (1.0 - t)
    n1 = float(t.sum())
    c01 = n1 - c11
    c00 = (ds.n_samples - n1) - c10
    return c11, c10, c01, c00


def eliminate_negative_features(ds: FeatureDataset, alpha: float = 0.0) -> np.ndarray:
    """Indices of features positively correlated with the target.

    A feature is kept iff the determinant of its (optionally smoothed) 2x2
    joint with the target is strictly positive.  With ``alpha = 0`` the
    determinant equals the empirical covariance, so independent and
    anti-correlated features are dropped exactly.
    """
    c11, c10, c01, c00 = _joint_counts(ds)
    total = ds.n_samples + 4.0 * alpha
    det = (c00 + alpha) * (c11 + alpha) - (c01 + alpha) * (c10 + alpha)
    det = det / (total * total)
    return np.nonzero(det > 0)[0]


def _plogq(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Elementwise p * log2(q) with the 0 * log 0 convention."""
    out = np.zeros_like(p)
    mask = p > 0
    out[mask] = p[mask] * np.log2(q[mask])
    return out


def _mi_bits(c11, c10, c01, c00, n, alpha):
    """Mutual information (bits) of feature and target from 2x2 counts."""
    total = n + 4.0 * alpha
    p = np.stack([c00 + alpha, c01 + alpha, c10 + alpha, c11 + alpha], axis=-1) / total
    # order: (x=0,t=0), (x=0,t=1), (x=1,t=0), (x=1,t=1)
    px0 = p[..., 0] + p[..., 1]
    px1 = p[..., 2] + p[..., 3]
    pt0 = p[..., 0] + p[..., 2]
    pt1 = p[..., 1] + p[..., 3]
    prod = np.stack([px0 * pt0, px0 * pt1, px1 * pt0, px1 * pt1], axis=-1)
    return (_plogq(p, p) - _plogq(p, prod)).sum(axis=-1)


def _cmi_bits(counts: np.ndarray, n: float, alpha: float) -> np.ndarray:
    """Conditional mutual information I(t; x | v) in bits.

    ``counts`` has shape ``(n_features, 2, 2, 2)`` indexed by
    ``(feature, x, v, t)``.
    """
    p = (counts + alpha) / (n + 8.0 * alpha)
    pv = p.sum(axis=(1, 3), keepdims=True)
    pxv = p.sum(axis=3, keepdims=True)
    pvt = p.sum(axis=1, keepdims=True)
    num = p * pv
    den = pxv * pvt
    term = np.zeros_like(p)
    mask = p > 0
    term[mask] = p[mask] * (np.log2(num[mask]) - np.log2(den[mask]))
    return term.sum(axis=(1, 2, 3))


def _conditional_counts(ds: FeatureDataset, v: int) -> np.ndarray:
    """Counts ``(n_features, x, v, t)`` for conditioning feature ``v``."""
    x = ds.x.astype(np.float64)
    xv = x[:, v]
    t = ds.t.astype(np.float64)
    counts = np.empty((ds.n_features, 2, 2, 2))
    for a in (0, 1):
        va = xv if a == 1 else 1.0 - xv
        for b in (0, 1):
            tb = t if b == 1 else 1.0 - t
            mask = va * tb
            c1 = x.T @ mask  # count(x_n = 1, v = a, t = b)
            counts[:, 1, a, b] = c1
            counts[:, 0, a, b] = float(mask.sum()) - c1
    return counts


def select_features_cmi(
    ds: FeatureDataset,
    candidates: Sequence[int],
    max_features: int,
    alpha: float = 0.0,
) -> list[int]:
    """Greedy feature selection by conditional mutual information.

    The first pick maximizes I(t; x).  Afterwards each candidate is scored
    by ``min over selected v of I(t; x | v)`` and the best is taken.  The
    search stops early when the best score is zero (within a small
    tolerance).  Score ties go to the lowest feature index.
    """
    if max_features < 1:
        raise ValueError("max_features must be positive")
    candidates = sorted(set(int(c) for c in candidates))
    if not candidates:
        raise ValueError("candidate set is empty")
    for c in candidates:
        if not 0 <= c < ds.n_features:
            raise ValueError(f"candidate index {c} out of range")
    cand = np.asarray(candidates, dtype=int)
    c11, c10, c01, c00 = _joint_counts(ds)
    mi = _mi_bits(c11, c10, c01, c00, float(ds.n_samples), alpha)
    first = int(cand[np.argmax(mi[cand])])
    selected = [first]
    remaining = [c for c in candidates if c != first]
    best_score = np.full(ds.n_features, np.inf)
    while remaining and len(selected) < max_features:
        counts = _conditional_counts(ds, selected[-1])
        cmi = _cmi_bits(counts, float(ds.n_samples), alpha)
        best_score = np.minimum(best_score, cmi)
        rem = np.asarray(remaining, dtype=int)
        scores = best_score[rem]
        top = float(scores.max())
        if top <= CMI_STOP_TOL:
            break
        pick = int(rem[np.argmax(scores)])  # argmax returns the lowest index on ties
        selected.append(pick)
        remaining.remove(pick)
    return selected


def train_naive_bayes(
    ds: FeatureDataset, selected: Sequence[int], class_id: str = "", alpha: float = NB_ALPHA
) -> DetectorModel:
    """Bernoulli naive Bayes with add-``alpha`` smoothed estimates."""
    if alpha <= 0:
        raise ValueError("alpha must be positive so probabilities stay inside (0, 1)")
    sel = np.asarray(list(selected), dtype=int)
    n = ds.n_samples
    n_pos = float(ds.t.sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need both positive and negative samples")
    xs = ds.x[:, sel].astype(np.float64) if sel.size else np.zeros((n, 0))
    pos = ds.t.astype(bool)
    prob_pos = (xs[pos].sum(axis=0) + alpha) / (n_pos + 2.0 * alpha)
    prob_neg = (xs[~pos].sum(axis=0) + alpha) / (n_neg + 2.0 * alpha)
    prior_pos = (n_pos + alpha) / (n + 2.0 * alpha)
    prior_neg = (n_neg + alpha) / (n + 2.0 * alpha)
    return DetectorModel(
        class_id=class_id,
        selected=sel,
        prob_pos=prob_pos,
        prob_neg=prob_neg,
        log_prior_pos=float(np.log(prior_pos)),
        log_prior_neg=float(np.log(prior_neg)),
    )


def feature_matrix(lib: SpectralLibrary, model: NhmcModel) -> np.ndarray:
    """Flattened binary labels for every sample, shape ``(n, n_s * L)``."""
    rows = [
        label_features(model, uwt(s, model.n_scales, model.mother)).flatten()
        for s in lib.samples
    ]
    return np.stack(rows)


def train_detector_bank(
    train_lib: SpectralLibrary,
    nhmc_model: NhmcModel,
    attenuation_grid: Sequence[float] = tuple(i / 10 for i in range(1, 11)),
    max_features: int = 50,
    alpha: float = NB_ALPHA,
    augment: bool = True,
    eliminate: bool = True,
    select: bool = True,
) -> DetectorBank:
    """Train one-vs-rest detectors for every class in the library.

    ``augment=False`` trains on the raw library; ``eliminate=False`` keeps
    all features as candidates; ``select=False`` skips the greedy search and
    fits naive Bayes on every candidate (the plain-NB ablation).
    """
    lib = augment_library(train_lib, attenuation_grid) if augment else train_lib
    labelled = [
        (s.class_label, label_features(nhmc_model, uwt(s, nhmc_model.n_scales, nhmc_model.mother)))
        for s in lib.samples
    ]
    detectors = []
    for cls in train_lib.classes:
        ds = build_feature_dataset(labelled, cls)
        candidates = (
            eliminate_negative_features(ds) if eliminate else np.arange(ds.n_features)
        )
        if select and len(candidates):
            chosen = select_features_cmi(ds, candidates, max_features)
        else:
            chosen = [int(c) for c in candidates]
        detectors.append(train_naive_bayes(ds, chosen, class_id=cls, alpha=alpha))
    return DetectorBank(
        detectors=tuple(detectors),
        nhmc=nhmc_model,
        attenuation_grid=tuple(float(g) for g in (attenuation_grid if augment else (1.0,))),
        wavelengths=np.asarray(train_lib.wavelengths, dtype=float),
    )


def detect(bank: DetectorBank, labels: FeatureLabelMatrix) -> DetectionReport:
    """Run every detector on one label matrix.

    The margin is the positive minus negative log posterior; a sample is
    positive only when the margin is strictly greater than zero, and a
    sample positive for no class is "unknown".
    """
    flat = labels.flatten()
    expected = bank.nhmc.n_scales * bank.nhmc.n_offsets
    if flat.size != expected:
        raise ValueError(f"label matrix has {flat.size} entries, bank expects {expected}")
    per_class = {}
    for det in bank.detectors:
        m = det.margin(flat)
        per_class[det.class_id] = Detection(decision=m > 0, margin=m)
    return DetectionReport(per_class)


def feature_report(bank: DetectorBank) -> list[dict]:
    """Rows describing every selected feature: class, rank, scale, channel, nm."""
    rows = []
    n_channels = bank.nhmc.n_offsets
    for det in bank.detectors:
        for rank, idx in enumerate(det.selected, start=1):
            scale = int(idx) // n_channels + 1
            channel = int(idx) % n_channels
            rows.append(
                {
                    "class": det.class_id,
                    "rank": rank,
                    "scale": scale,
                    "channel": channel,
                    "wavelength_nm": float(bank.wavelengths[channel]),
                }
            )
    return rows
