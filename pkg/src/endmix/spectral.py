"""Reflectance spectra, spectral libraries, library I/O, and the train/test protocol.

A :class:`Spectrum` is a reflectance curve sampled on a strictly increasing
wavelength grid.  A :class:`SpectralLibrary` is an ordered collection of
labelled spectra sharing one grid, with a class index derived from the
labels.  The module also provides a deterministic synthetic-library
generator, a 2-means train/test splitter, and class-size equalization via
intimate (Hapke) within-class mixing.
"""

from __future__ import annotations

import re
from dataclasses import InitVar, dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Spectrum",
    "SpectralLibrary",
    "load_library",
    "save_library",
    "generate_synthetic_library",
    "split_train_test_kmeans",
    "equalize_classes_hapke",
]

# Wavelength range of the synthetic libraries, in nanometres.
SYNTHETIC_RANGE_NM = (400.0, 2500.0)

# Reflectance bounds applied to synthetic spectra.
SYNTHETIC_CLIP = (0.01, 0.99)

_HEADER_TOKEN = re.compile(
    r"^(?P<sid>[^:@,]+):(?P<label>[^:@,]+)(?:@i(?P<inc>[0-9.+-eE]+)e(?P<emi>[0-9.+-eE]+))?$"
)


@dataclass(frozen=True)
class Spectrum:
    """A single reflectance spectrum.

    Parameters
    ----------
    wavelengths:
        Strictly increasing wavelength grid in nanometres, length >= 2.
    reflectance:
        Reflectance values on the grid.  Finite; nonnegative unless
        ``allow_negative`` is set (mixture models with signed second-order
        terms and additive noise can legitimately dip below zero).
    class_label:
        Optional opaque class identifier.
    geometry:
        Optional ``(incidence_deg, emission_deg)`` viewing geometry.
    """

    wavelengths: np.ndarray
    reflectance: np.ndarray
    class_label: str | None = None
    geometry: tuple[float, float] | None = None
    allow_negative: InitVar[bool] = False

    def __post_init__(self, allow_negative: bool) -> None:
        wl = np.asarray(self.wavelengths, dtype=float)
        rf = np.asarray(self.reflectance, dtype=float)
        if wl.ndim != 1 or rf.ndim != 1:
            raise ValueError("wavelengths and reflectance must be 1-D")
        if wl.size != rf.size:
            raise ValueError(
                f"length mismatch: {wl.size} wavelengths vs {rf.size} reflectance values"
            )
        if wl.size < 2:
            raise ValueError("a spectrum needs at least 2 channels")
        if not np.all(np.isfinite(wl)):
            raise ValueError("wavelengths must be finite")
        if np.any(np.diff(wl) <= 0):
            raise ValueError("wavelengths must be strictly increasing")
        if not np.all(np.isfinite(rf)):
            raise ValueError("reflectance values must be finite")
        if not allow_negative and np.any(rf < 0):
            raise ValueError("reflectance values must be nonnegative")
        if self.geometry is not None:
            inc, emi = self.geometry
            object.__setattr__(self, "geometry", (float(inc), float(emi)))
        wl = wl.copy()
        rf = rf.copy()
        wl.setflags(write=False)
        rf.setflags(write=False)
        object.__setattr__(self, "wavelengths", wl)
        object.__setattr__(self, "reflectance", rf)

    @property
    def n_channels(self) -> int:
        return int(self.wavelengths.size)


class SpectralLibrary:
    """Ordered collection of labelled spectra on one wavelength grid."""

    def __init__(self, samples: Sequence[Spectrum], sample_ids: Sequence[str] | None = None):
        samples = tuple(samples)
        if not samples:
            raise ValueError("library must contain at least one sample")
        if sample_ids is None:
            sample_ids = tuple(f"s{i:04d}" for i in range(len(samples)))
        else:
            sample_ids = tuple(str(s) for s in sample_ids)
        if len(sample_ids) != len(samples):
            raise ValueError("sample_ids length must match samples")
        if len(set(sample_ids)) != len(sample_ids):
            raise ValueError("sample ids must be unique")
        grid = samples[0].wavelengths
        for i, s in enumerate(samples):
            if not np.array_equal(s.wavelengths, grid):
                raise ValueError(f"sample {sample_ids[i]!r} is not on the shared wavelength grid")
            if s.class_label is None:
                raise ValueError(f"sample {sample_ids[i]!r} has no class label")
        index: dict[str, list[int]] = {}
        for i, s in enumerate(samples):
            index.setdefault(s.class_label, []).append(i)
        self.samples = samples
        self.sample_ids = sample_ids
        self.class_index: dict[str, tuple[int, ...]] = {c: tuple(v) for c, v in index.items()}

    @property
    def wavelengths(self) -> np.ndarray:
        return self.samples[0].wavelengths

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    @property
    def n_channels(self) -> int:
        return self.samples[0].n_channels

    @property
    def classes(self) -> tuple[str, ...]:
        return tuple(self.class_index)

    @property
    def reflectance_matrix(self) -> np.ndarray:
        """All samples stacked as an ``(n_samples, n_channels)`` array."""
        return np.stack([s.reflectance for s in self.samples])

    def class_of(self, index: int) -> str:
        return self.samples[index].class_label

    def subset(self, indices: Iterable[int]) -> "SpectralLibrary":
        idx = list(indices)
        return SpectralLibrary(
            [self.samples[i] for i in idx], [self.sample_ids[i] for i in idx]
        )

    def __len__(self) -> int:
        return len(self.samples)


def _format_float(x: float) -> str:
    # repr gives the shortest string that round-trips to the same float64
    return repr(float(x))


def save_library(path, lib: SpectralLibrary, header_lines: Sequence[str] = ()) -> None:
    """Write a library as CSV: wavelength column plus one column per sample.

    Column headers follow ``sample_id:class_label`` with an optional
    ``@i<deg>e<deg>`` viewing-geometry suffix.  Floats are written with full
    round-trip precision, so ``load_library`` recovers the library exactly.
    """
    cols = []
    for sid, s in zip(lib.sample_ids, lib.samples):
        for piece, what in ((sid, "sample id"), (s.class_label, "class label")):
            if any(ch in piece for ch in ",:@"):
                raise ValueError(f"{what} {piece!r} contains a reserved character")
        tok = f"{sid}:{s.class_label}"
        if s.geometry is not None:
            tok += f"@i{_format_float(s.geometry[0])}e{_format_float(s.geometry[1])}"
        cols.append(tok)
    lines = [ln if ln.startswith("#") else "# " + ln for ln in header_lines]
    lines.append("wavelength_nm," + ",".join(cols))
    R = lib.reflectance_matrix
    for j, wl in enumerate(lib.wavelengths):
        lines.append(_format_float(wl) + "," + ",".join(_format_float(v) for v in R[:, j]))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_library(path) -> SpectralLibrary:
    """Parse a library CSV written in the format of :func:`save_library`.

    Raises ``ValueError`` naming the offending line for malformed headers,
    ragged rows, unparsable numbers, non-increasing wavelengths, or negative
    reflectance.
    """
    with open(path, "r", encoding="utf-8") as fh:
        raw = fh.read().splitlines()
    rows: list[tuple[int, str]] = [
        (ln_no + 1, ln) for ln_no, ln in enumerate(raw) if ln.strip() and not ln.lstrip().startswith("#")
    ]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    head_no, head = rows[0]
    fields = head.split(",")
    if fields[0].strip() != "wavelength_nm":
        raise ValueError(f"{path}: line {head_no}: header must start with 'wavelength_nm'")
    if len(fields) < 2:
        raise ValueError(f"{path}: line {head_no}: header declares no samples")
    ids: list[str] = []
    labels: list[str] = []
    geoms: list[tuple[float, float] | None] = []
    for tok in fields[1:]:
        m = _HEADER_TOKEN.match(tok.strip())
        if not m:
            raise ValueError(
                f"{path}: line {head_no}: malformed column header {tok.strip()!r}"
            )
        ids.append(m.group("sid"))
        labels.append(m.group("label"))
        if m.group("inc") is not None:
            geoms.append((float(m.group("inc")), float(m.group("emi"))))
        else:
            geoms.append(None)
    n_cols = len(fields)
    wavelengths: list[float] = []
    values: list[list[float]] = []
    for ln_no, ln in rows[1:]:
        parts = ln.split(",")
        if len(parts) != n_cols:
            raise ValueError(
                f"{path}: line {ln_no}: expected {n_cols} fields, found {len(parts)}"
            )
        try:
            nums = [float(p) for p in parts]
        except ValueError:
            raise ValueError(f"{path}: line {ln_no}: unparsable number") from None
        if wavelengths and nums[0] <= wavelengths[-1]:
            raise ValueError(f"{path}: line {ln_no}: wavelengths must be strictly increasing")
        neg = [v for v in nums[1:] if v < 0]
        if neg:
            raise ValueError(f"{path}: line {ln_no}: negative reflectance value {neg[0]!r}")
        wavelengths.append(nums[0])
        values.append(nums[1:])
    if len(values) < 2:
        raise ValueError(f"{path}: fewer than 2 wavelength rows")
    V = np.asarray(values)
    samples = [
        Spectrum(np.asarray(wavelengths), V[:, i], class_label=labels[i], geometry=geoms[i])
        for i in range(len(ids))
    ]
    return SpectralLibrary(samples, ids)


# hydration bands present in every class: (centre nm, width nm); depths vary
# per sample, so these carry no class information
SHARED_BANDS_NM = ((1400.0, 55.0), (1900.0, 75.0))

# anchor bands at positions common to every class (centre nm, width nm);
# each class has its own stable depth pattern over them.  They give library
# columns the high mutual coherence of real mineral libraries.
ANCHOR_BANDS_NM = (
    (700.0, 80.0),
    (1000.0, 90.0),
    (1250.0, 70.0),
    (1650.0, 85.0),
    (2150.0, 95.0),
)


def generate_synthetic_library(
    n_classes: int, samples_per_class: int, n_channels: int, seed: int
) -> SpectralLibrary:
    """Build a deterministic synthetic reflectance library.

    Each class is a smooth continuum minus Gaussian absorption bands.
    Three kinds of bands appear: hydration bands at fixed wavelengths
    shared by every class (depths vary per sample, so they carry no class
    information); anchor bands at positions common to all classes but with
    class-specific depth patterns, which make library columns mutually
    coherent the way real mineral spectra are; and class-unique diagnostic
    bands whose centre/width/depth are class-specific, the strongest
    centred on a disjoint partition of the grid so class-mean spectra
    attain their minima at distinct wavelengths.  Within-class variability
    perturbs band depths and the continuum level/slope only; band positions
    are stable within a class, as they are for real materials.  Output
    reflectance is clipped to [0.01, 0.99].
    """
    if n_classes < 1 or samples_per_class < 1:
        raise ValueError("n_classes and samples_per_class must be positive")
    if n_channels < 2:
        raise ValueError("n_channels must be at least 2")
    lo, hi = SYNTHETIC_RANGE_NM
    grid = np.linspace(lo, hi, n_channels)
    mid = 0.5 * (lo + hi)
    rng = np.random.default_rng(seed)
    samples: list[Spectrum] = []
    ids: list[str] = []
    span = hi - lo
    cell = span / n_classes
    for c in range(n_classes):
        label = f"class{c:02d}"
        base = 0.62 + rng.uniform(-0.05, 0.05)
        slope = rng.uniform(-0.04, 0.04)  # per 1000 nm
        anchor_depths = rng.uniform(0.04, 0.18, size=len(ANCHOR_BANDS_NM))
        unique = [
            # deepest band, on this class's own cell of the wavelength grid
            (lo + (c + 0.65) * cell, rng.uniform(25.0, 60.0), rng.uniform(0.30, 0.42)),
            # a weaker companion elsewhere in the same cell
            (lo + (c + 0.2) * cell, rng.uniform(20.0, 55.0), rng.uniform(0.12, 0.20)),
        ]
        for i in range(samples_per_class):
            level = base + rng.uniform(-0.03, 0.03)
            tilt = slope + rng.uniform(-0.01, 0.01)
            r = level + tilt * (grid - mid) / 1000.0
            for (center, width), depth in zip(ANCHOR_BANDS_NM, anchor_depths):
                d = depth * rng.uniform(0.8, 1.2)
                r = r - d * np.exp(-0.5 * ((grid - center) / width) ** 2)
            for center, width, depth in unique:
                d = depth * rng.uniform(0.8, 1.2)
                r = r - d * np.exp(-0.5 * ((grid - center) / width) ** 2)
            for center, width in SHARED_BANDS_NM:
                d = rng.uniform(0.08, 0.22)
                r = r - d * np.exp(-0.5 * ((grid - center) / width) ** 2)
            r = np.clip(r, SYNTHETIC_CLIP[0], SYNTHETIC_CLIP[1])
            samples.append(Spectrum(grid, r, class_label=label, geometry=(30.0, 0.0)))
            ids.append(f"{label}_s{i:02d}")
    return SpectralLibrary(samples, ids)


def _two_means(X: np.ndarray) -> np.ndarray:
    """2-means with farthest-pair seeding, Lloyd iterations, and single-point
    improvement passes.  Returns 0/1 assignments.

    The improvement passes guarantee that no single reassignment of one
    point to the other cluster decreases the within-cluster sum of squares.
    """
    n = X.shape[0]
    sq = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=-1)
    if float(sq.max()) == 0.0:
        # all points identical: fall back to a first-half / second-half split
        labels = np.zeros(n, dtype=int)
        labels[(n + 1) // 2 :] = 1
        return labels
    i0, j0 = np.unravel_index(int(np.argmax(sq)), sq.shape)
    centers = np.stack([X[i0], X[j0]])
    labels = None
    for _it in range(200):
        d = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
        new_labels = np.argmin(d, axis=1)
        for c in range(2):
            if not np.any(new_labels == c):
                far = int(np.argmax(d[:, 1 - c]))
                new_labels[far] = c
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        centers = np.stack([X[labels == c].mean(axis=0) for c in range(2)])
    # single-point (Hartigan style) refinement until locally optimal
    counts = np.array([int(np.sum(labels == c)) for c in range(2)])
    improved = True
    while improved:
        improved = False
        for i in range(n):
            a = labels[i]
            b = 1 - a
            if counts[a] <= 1:
                continue
            da = float(np.sum((X[i] - centers[a]) ** 2))
            db = float(np.sum((X[i] - centers[b]) ** 2))
            delta = counts[b] / (counts[b] + 1) * db - counts[a] / (counts[a] - 1) * da
            if delta < -1e-12:
                centers[a] = (centers[a] * counts[a] - X[i]) / (counts[a] - 1)
                centers[b] = (centers[b] * counts[b] + X[i]) / (counts[b] + 1)
                counts[a] -= 1
                counts[b] += 1
                labels[i] = b
                improved = True
    return labels


def split_train_test_kmeans(
    lib: SpectralLibrary, seed: int = 0
) -> tuple[SpectralLibrary, SpectralLibrary]:
    """Split every class into train/test via 2-means on reflectance vectors.

    The larger cluster becomes training data; ties go to the cluster whose
    members have the lower mean library index.  The procedure is
    deterministic (farthest-pair seeding); ``seed`` is accepted for interface
    stability but does not influence the result.
    """
    del seed
    train_idx: list[int] = []
    test_idx: list[int] = []
    for cls, members in lib.class_index.items():
        if len(members) < 2:
            raise ValueError(f"class {cls!r} has fewer than 2 samples")
        X = np.stack([lib.samples[i].reflectance for i in members])
        labels = _two_means(X)
        size0 = int(np.sum(labels == 0))
        size1 = len(members) - size0
        if size0 != size1:
            train_cluster = 0 if size0 > size1 else 1
        else:
            idx = np.asarray(members)
            mean0 = float(np.mean(idx[labels == 0]))
            mean1 = float(np.mean(idx[labels == 1]))
            train_cluster = 0 if mean0 <= mean1 else 1
        for pos, gidx in enumerate(members):
            (train_idx if labels[pos] == train_cluster else test_idx).append(gidx)
    return lib.subset(sorted(train_idx)), lib.subset(sorted(test_idx))


def equalize_classes_hapke(
    lib: SpectralLibrary,
    target_count: int,
    geometry,
    seed: int = 0,
) -> SpectralLibrary:
    """Top deficient classes up to ``target_count`` samples.

    New samples are intimate (single-scattering-albedo domain) mixtures of
    two randomly chosen within-class samples with Dirichlet(1, 1) weights;
    drawing the same sample twice is allowed.  Existing samples are kept
    untouched and new ones are appended after them, grouped by class.
    """
    from .mixing import HapkeGeometry, mix_hapke

    if not isinstance(geometry, HapkeGeometry):
        geometry = HapkeGeometry(*geometry)
    max_size = max(len(v) for v in lib.class_index.values())
    if target_count < max_size:
        raise ValueError(
            f"target_count {target_count} is below the largest class size {max_size}"
        )
    rng = np.random.default_rng(seed)
    samples = list(lib.samples)
    ids = list(lib.sample_ids)
    for cls, members in lib.class_index.items():
        have = len(members)
        for j in range(target_count - have):
            i0 = int(rng.integers(len(members)))
            i1 = int(rng.integers(len(members)))
            weights = rng.dirichlet(np.ones(2))
            mixed = mix_hapke(
                [lib.samples[members[i0]], lib.samples[members[i1]]], weights, geometry
            )
            samples.append(
                Spectrum(
                    mixed.wavelengths,
                    mixed.reflectance,
                    class_label=cls,
                    geometry=(geometry.incidence_deg, geometry.emergence_deg),
                )
            )
            ids.append(f"{cls}_h{j:03d}")
    return SpectralLibrary(samples, ids)
