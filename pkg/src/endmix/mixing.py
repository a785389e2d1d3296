"""Synthetic mixed-pixel generation.

Seven mixing models over library endmembers: LMM (linear), FM/GBM/NM
(bilinear families differing in how pair terms are weighted), SM (bilinear
terms only), PPNM (linear plus a quadratic post-nonlinearity), and HM
(intimate Hapke mixing, linear in single-scattering albedo).  Plus Dirichlet
coefficient sampling, SNR-controlled Gaussian noise, and batch dataset
generation with per-task deterministic RNG streams.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .spectral import SpectralLibrary, Spectrum, _format_float

__all__ = [
    "MIXING_MODELS",
    "HapkeGeometry",
    "MixtureSpec",
    "NoiseSpec",
    "MixtureDataset",
    "sample_abundances",
    "mix",
    "ssa_to_reflectance",
    "reflectance_to_ssa",
    "mix_hapke",
    "add_noise",
    "generate_mixture_set",
    "save_mixture_dataset",
    "load_mixture_dataset",
]

MIXING_MODELS = ("LMM", "FM", "NM", "GBM", "PPNM", "SM", "HM")

# reflectance is clipped into this open interval before SSA inversion so the
# bisection bracket [1e-9, 1 - 1e-9] always contains a root
REFLECTANCE_CLIP = (1e-6, 1.0 - 1e-6)

_BISECTION_TOL = 1e-10
_BISECTION_MAX_ITERS = 60


@dataclass(frozen=True)
class HapkeGeometry:
    """Illumination/viewing geometry: incidence and emergence angles (degrees).

    The scattering assumptions are fixed: unit porosity factor, isotropic
    phase function, no backscatter term.
    """

    incidence_deg: float = 30.0
    emergence_deg: float = 0.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.incidence_deg) and math.isfinite(self.emergence_deg)):
            raise ValueError("angles must be finite")
        if self.mu0 <= 0 or self.mu <= 0:
            raise ValueError("angle cosines must be positive (angles within ±90°)")

    @property
    def mu0(self) -> float:
        """Cosine of the incidence angle."""
        return math.cos(math.radians(self.incidence_deg))

    @property
    def mu(self) -> float:
        """Cosine of the emergence angle."""
        return math.cos(math.radians(self.emergence_deg))


@dataclass(frozen=True)
class NoiseSpec:
    """Additive white Gaussian noise at a target signal-to-noise ratio."""

    snr_db: float = 50.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not math.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")


@dataclass(frozen=True)
class MixtureSpec:
    """Recipe for one synthetic mixture.

    ``endmember_refs`` are sample indices into a library.  ``abundances``
    lie on the probability simplex for all models that use them.  GBM adds a
    uniform (0,1) weight per endmember pair, PPNM a scalar ``b`` in (-3, 3),
    and NM/SM a joint simplex vector over linear-then-pair terms (the linear
    part is identically zero for SM).  Pairs are ordered lexicographically:
    (0,1), (0,2), ..., (1,2), ...
    """

    model: str
    endmember_refs: tuple[int, ...]
    abundances: tuple[float, ...] = ()
    gbm_gammas: tuple[float, ...] = ()
    ppnm_b: float | None = None
    nm_coeffs: tuple[float, ...] = ()
    geometry: HapkeGeometry | None = None

    def __post_init__(self) -> None:
        if self.model not in MIXING_MODELS:
            raise ValueError(f"unknown mixing model {self.model!r}")
        m = len(self.endmember_refs)
        if m < 1:
            raise ValueError("need at least one endmember reference")
        n_pairs = m * (m - 1) // 2
        if self.model in ("LMM", "FM", "GBM", "PPNM", "HM"):
            _check_simplex(self.abundances, m, "abundances")
        if self.model == "GBM":
            if len(self.gbm_gammas) != n_pairs:
                raise ValueError(f"GBM needs {n_pairs} gammas, got {len(self.gbm_gammas)}")
            # sampling uses the open interval; zero is allowed so constructed
            # sweeps can pin the exact linear-model reduction
            if any(not (0.0 <= g < 1.0) for g in self.gbm_gammas):
                raise ValueError("GBM gammas must lie in [0, 1)")
        if self.model == "PPNM":
            # sampling uses the open interval; closed endpoints are allowed
            # so constructed sweeps can pin b = +/-3 exactly
            if self.ppnm_b is None or not (-3.0 <= self.ppnm_b <= 3.0):
                raise ValueError("PPNM needs scalar b in [-3, 3]")
        if self.model == "NM":
            _check_simplex(self.nm_coeffs, m + n_pairs, "nm_coeffs")
        if self.model == "SM":
            if m < 2:
                raise ValueError("SM needs at least 2 endmembers (no pair terms otherwise)")
            _check_simplex(self.nm_coeffs, m + n_pairs, "nm_coeffs")
            if any(c != 0.0 for c in self.nm_coeffs[:m]):
                raise ValueError("SM linear coefficients must be identically zero")
        if self.model == "HM" and self.geometry is None:
            raise ValueError("HM needs a HapkeGeometry")

    @property
    def n_endmembers(self) -> int:
        return len(self.endmember_refs)


def _check_simplex(values: Sequence[float], length: int, name: str) -> None:
    if len(values) != length:
        raise ValueError(f"{name} must have length {length}, got {len(values)}")
    arr = np.asarray(values, dtype=float)
    if np.any(arr < 0):
        raise ValueError(f"{name} must be nonnegative")
    if abs(float(arr.sum()) - 1.0) > 1e-12:
        raise ValueError(f"{name} must sum to 1 within 1e-12")


def _pairs(m: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(m) for j in range(i + 1, m)]


def sample_abundances(
    model: str,
    M: int,
    seed: int | np.random.Generator,
    endmember_refs: Sequence[int] | None = None,
    geometry: HapkeGeometry | None = None,
) -> MixtureSpec:
    """Draw mixing coefficients for one mixture of ``M`` endmembers.

    Abundances come from the flat Dirichlet (uniform on the simplex).  For
    NM the joint vector over linear and pair terms is one flat Dirichlet
    draw; for SM only the pair terms are drawn.  GBM pair weights are iid
    uniform on (0, 1) and the PPNM scalar is uniform on (-3, 3).
    """
    if model not in MIXING_MODELS:
        raise ValueError(f"unknown mixing model {model!r}")
    if M < 1:
        raise ValueError("M must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    refs = tuple(range(M)) if endmember_refs is None else tuple(int(r) for r in endmember_refs)
    if len(refs) != M:
        raise ValueError("endmember_refs must have length M")
    n_pairs = M * (M - 1) // 2

    def simplex(n: int) -> tuple[float, ...]:
        if n == 1:
            return (1.0,)
        return tuple(rng.dirichlet(np.ones(n)))

    kwargs: dict = {}
    if model in ("LMM", "FM", "GBM", "PPNM", "HM"):
        kwargs["abundances"] = simplex(M)
    if model == "GBM":
        kwargs["gbm_gammas"] = tuple(rng.uniform(0.0, 1.0, size=n_pairs))
    if model == "PPNM":
        kwargs["ppnm_b"] = float(rng.uniform(-3.0, 3.0))
    if model == "NM":
        kwargs["nm_coeffs"] = simplex(M + n_pairs)
    if model == "SM":
        if M < 2:
            raise ValueError("SM needs M >= 2")
        kwargs["nm_coeffs"] = (0.0,) * M + simplex(n_pairs)
    if model == "HM":
        kwargs["geometry"] = geometry if geometry is not None else HapkeGeometry()
    return MixtureSpec(model=model, endmember_refs=refs, **kwargs)


def mix(spec: MixtureSpec, lib: SpectralLibrary) -> Spectrum:
    """Synthesize the mixed spectrum described by ``spec``.

    PPNM output may dip below zero for negative ``b``; values are left
    unclipped.  All other models produce nonnegative output for nonnegative
    endmembers.
    """
    for r in spec.endmember_refs:
        if not 0 <= r < lib.n_samples:
            raise ValueError(f"endmember reference {r} out of range")
    E = np.stack([lib.samples[r].reflectance for r in spec.endmember_refs])
    m = spec.n_endmembers
    pairs = _pairs(m)
    model = spec.model

    if model == "HM":
        ems = [lib.samples[r] for r in spec.endmember_refs]
        return mix_hapke(ems, np.asarray(spec.abundances), spec.geometry)

    if model in ("LMM", "FM", "GBM", "PPNM"):
        a = np.asarray(spec.abundances)
        y = a @ E
        if model == "FM":
            for (i, j) in pairs:
                y = y + a[i] * a[j] * E[i] * E[j]
        elif model == "GBM":
            for g, (i, j) in zip(spec.gbm_gammas, pairs):
                y = y + g * a[i] * a[j] * E[i] * E[j]
        elif model == "PPNM":
            y = y + spec.ppnm_b * y * y
            return Spectrum(lib.wavelengths, y, allow_negative=True)
        return Spectrum(lib.wavelengths, y)

    # NM / SM: joint coefficients over linear then pair terms
    coeffs = np.asarray(spec.nm_coeffs)
    y = coeffs[:m] @ E
    for beta, (i, j) in zip(coeffs[m:], pairs):
        y = y + beta * E[i] * E[j]
    return Spectrum(lib.wavelengths, y)


def ssa_to_reflectance(w, g: HapkeGeometry):
    """Bidirectional reflectance factor of a surface with single-scattering
    albedo ``w`` under geometry ``g``.

    Uses the isotropic-scattering approximation of the multiple-scattering
    function, H(x, w) = (1 + 2x) / (1 + 2x * sqrt(1 - w)).  Strictly
    increasing in ``w``, with value 0 at ``w = 0``.  Accepts scalars or
    arrays; ``w`` must lie in [0, 1).
    """
    w_arr = np.asarray(w, dtype=float)
    if np.any(w_arr < 0) or np.any(w_arr >= 1):
        raise ValueError("single-scattering albedo must lie in [0, 1)")
    mu0, mu = g.mu0, g.mu
    root = np.sqrt(1.0 - w_arr)
    h0 = (1.0 + 2.0 * mu0) / (1.0 + 2.0 * mu0 * root)
    h1 = (1.0 + 2.0 * mu) / (1.0 + 2.0 * mu * root)
    r = (w_arr / 4.0) * (1.0 / (mu0 + mu)) * h0 * h1
    if np.isscalar(w) or w_arr.ndim == 0:
        return float(r)
    return r


def reflectance_to_ssa(r, g: HapkeGeometry):
    """Invert :func:`ssa_to_reflectance` by bisection.

    ``r`` must lie inside (0, 1); callers clip measured reflectance to
    [1e-6, 1 - 1e-6] first.  The bracket [1e-9, 1 - 1e-9] halves at most 60
    times, which already exceeds the 1e-10 tolerance on the albedo.
    """
    r_arr = np.atleast_1d(np.asarray(r, dtype=float))
    if np.any(r_arr <= 0) or np.any(r_arr >= 1):
        raise ValueError("reflectance must lie strictly inside (0, 1)")
    lo = np.full_like(r_arr, 1e-9)
    hi = np.full_like(r_arr, 1.0 - 1e-9)
    if np.any(ssa_to_reflectance(hi, g) < r_arr):
        raise ValueError("reflectance exceeds the model's range for this geometry")
    for _ in range(_BISECTION_MAX_ITERS):
        mid = 0.5 * (lo + hi)
        too_low = ssa_to_reflectance(mid, g) < r_arr
        lo = np.where(too_low, mid, lo)
        hi = np.where(too_low, hi, mid)
        if np.all(hi - lo <= _BISECTION_TOL):
            break
    w = 0.5 * (lo + hi)
    if np.isscalar(r) or np.asarray(r).ndim == 0:
        return float(w[0])
    return w


def mix_hapke(
    endmembers: Sequence[Spectrum], a: np.ndarray, g: HapkeGeometry | None = None
) -> Spectrum:
    """Intimate mixture: linear in single-scattering albedo, per wavelength.

    Each endmember's reflectance is clipped into (0, 1), inverted to albedo,
    albedos are convexly combined with weights ``a``, and the result is
    mapped back to reflectance under the same geometry.
    """
    if g is None:
        g = HapkeGeometry()
    if not endmembers:
        raise ValueError("need at least one endmember")
    a = np.asarray(a, dtype=float)
    _check_simplex(a, len(endmembers), "abundances")
    grid = endmembers[0].wavelengths
    w_mix = np.zeros_like(grid, dtype=float)
    for weight, s in zip(a, endmembers):
        if s.reflectance.shape != grid.shape:
            raise ValueError("endmembers must share one wavelength grid")
        refl = np.clip(s.reflectance, *REFLECTANCE_CLIP)
        w_mix = w_mix + weight * reflectance_to_ssa(refl, g)
    mixed = ssa_to_reflectance(np.minimum(w_mix, 1.0 - 1e-12), g)
    return Spectrum(grid, mixed, geometry=(g.incidence_deg, g.emergence_deg))


def add_noise(y: Spectrum, spec: NoiseSpec) -> Spectrum:
    """Add white Gaussian noise scaled so the sample SNR matches the target.

    The variance is the spectrum's mean squared value divided by the linear
    SNR: sigma^2 = (y . y) / (10^(SNR/10) * L).
    """
    r = y.reflectance
    sigma2 = float(r @ r) / (10.0 ** (spec.snr_db / 10.0) * r.size)
    rng = np.random.default_rng(spec.seed)
    noisy = r + rng.normal(0.0, math.sqrt(sigma2), size=r.size)
    return Spectrum(
        y.wavelengths, noisy, class_label=y.class_label, geometry=y.geometry,
        allow_negative=True,
    )


@dataclass(frozen=True)
class MixtureDataset:
    """A batch of synthetic mixtures with ground truth.

    ``spectra[i]`` is the noisy mixture, ``true_classes[i]`` the set of
    class ids mixed into it, and ``specs[i]`` the full recipe.  ``clean[i]``
    keeps the pre-noise spectrum for nonlinearity analysis.
    """

    model: str
    spectra: tuple[Spectrum, ...]
    true_classes: tuple[frozenset[str], ...]
    specs: tuple[MixtureSpec, ...]
    clean: tuple[Spectrum, ...]
    ids: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        n = len(self.spectra)
        if not (len(self.true_classes) == len(self.specs) == len(self.clean) == n):
            raise ValueError("dataset fields must be aligned")
        if not self.ids:
            object.__setattr__(self, "ids", tuple(f"px{i:06d}" for i in range(n)))
        elif len(self.ids) != n:
            raise ValueError("ids must align with spectra")

    def __len__(self) -> int:
        return len(self.spectra)

    @property
    def wavelengths(self) -> np.ndarray:
        return self.spectra[0].wavelengths

    def reflectance_matrix(self) -> np.ndarray:
        """All noisy spectra stacked as columns, shape (L, n)."""
        return np.stack([s.reflectance for s in self.spectra], axis=1)


def generate_mixture_set(
    test_lib: SpectralLibrary,
    model: str,
    M: int,
    n_combos: int,
    n_weights: int,
    noise: NoiseSpec,
    seed: int,
    geometry: HapkeGeometry | None = None,
) -> MixtureDataset:
    """Generate ``n_combos * n_weights`` mixtures of ``M`` classes each.

    Draws ``n_combos`` distinct class combinations, fixes one uniformly
    chosen sample per class within each combination, then draws
    ``n_weights`` independent coefficient vectors per combination.  Every
    random quantity comes from a stream derived from ``(seed, combo index,
    weight index)``, so regeneration is deterministic and order-independent.
    """
    if model not in MIXING_MODELS:
        raise ValueError(f"unknown mixing model {model!r}")
    classes = test_lib.classes
    if len(classes) < M:
        raise ValueError(f"library has {len(classes)} classes, need at least {M}")
    n_available = math.comb(len(classes), M)
    if n_combos > n_available:
        raise ValueError(f"cannot draw {n_combos} distinct combinations from {n_available}")

    combo_rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    chosen: list[tuple[str, ...]] = []
    seen: set[tuple[str, ...]] = set()
    while len(chosen) < n_combos:
        pick = tuple(sorted(combo_rng.choice(len(classes), size=M, replace=False).tolist()))
        names = tuple(classes[i] for i in pick)
        if names not in seen:
            seen.add(names)
            chosen.append(names)

    spectra: list[Spectrum] = []
    truths: list[frozenset[str]] = []
    specs: list[MixtureSpec] = []
    cleans: list[Spectrum] = []
    for ci, combo in enumerate(chosen):
        member_rng = np.random.default_rng(np.random.SeedSequence([seed, 1, ci]))
        refs = tuple(
            int(member_rng.choice(test_lib.class_index[cls])) for cls in combo
        )
        for wi in range(n_weights):
            coeff_rng = np.random.default_rng(np.random.SeedSequence([seed, 2, ci, wi]))
            spec = sample_abundances(model, M, coeff_rng, endmember_refs=refs, geometry=geometry)
            clean = mix(spec, test_lib)
            noise_seed = np.random.SeedSequence([noise.seed, 3, ci, wi]).generate_state(1)[0]
            noisy = add_noise(clean, NoiseSpec(noise.snr_db, int(noise_seed)))
            spectra.append(noisy)
            truths.append(frozenset(combo))
            specs.append(spec)
            cleans.append(clean)
    return MixtureDataset(
        model=model,
        spectra=tuple(spectra),
        true_classes=tuple(truths),
        specs=tuple(specs),
        clean=tuple(cleans),
    )


def save_mixture_dataset(
    path: str | Path,
    dataset: MixtureDataset,
    header_lines: Iterable[str] = (),
    sidecar_path: str | Path | None = None,
) -> None:
    """Write the dataset as CSV: one mixture per row, plus a coefficient
    sidecar for auditability.

    Main file columns: id, model, true classes joined by ``;``, then one
    reflectance value per wavelength.  Sidecar columns: id, coefficient
    kind, and the values joined by ``;``.
    """
    path = Path(path)
    wl = dataset.wavelengths
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        cols = ",".join(_format_float(x) for x in wl)
        fh.write(f"id,model,true_classes,{cols}\n")
        for pid, spec_row, truth in zip(dataset.ids, dataset.spectra, dataset.true_classes):
            vals = ",".join(_format_float(x) for x in spec_row.reflectance)
            truth_str = ";".join(sorted(truth))
            fh.write(f"{pid},{dataset.model},{truth_str},{vals}\n")
    if sidecar_path is None:
        return
    with open(Path(sidecar_path), "w", encoding="utf-8", newline="\n") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("id,field,values\n")
        for pid, mspec in zip(dataset.ids, dataset.specs):
            rows = [("endmember_refs", ";".join(str(r) for r in mspec.endmember_refs))]
            if mspec.abundances:
                rows.append(
                    ("abundances", ";".join(_format_float(a) for a in mspec.abundances))
                )
            if mspec.gbm_gammas:
                rows.append(
                    ("gbm_gammas", ";".join(_format_float(g) for g in mspec.gbm_gammas))
                )
            if mspec.ppnm_b is not None:
                rows.append(("ppnm_b", _format_float(mspec.ppnm_b)))
            if mspec.nm_coeffs:
                rows.append(
                    ("nm_coeffs", ";".join(_format_float(c) for c in mspec.nm_coeffs))
                )
            if mspec.geometry is not None:
                rows.append(
                    (
                        "geometry",
                        f"{_format_float(mspec.geometry.incidence_deg)};"
                        f"{_format_float(mspec.geometry.emergence_deg)}",
                    )
                )
            for kind, values in rows:
                fh.write(f"{pid},{kind},{values}\n")


def load_mixture_dataset(path: str | Path) -> tuple[str, list[str], list[frozenset[str]], np.ndarray, np.ndarray]:
    """Read back the main dataset CSV.

    Returns (model, ids, true class sets, wavelengths, reflectance matrix
    with one row per mixture).  The coefficient sidecar is audit-only and
    has no loader.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty dataset file") from None
        if header[:3] != ["id", "model", "true_classes"]:
            raise ValueError(f"{path}: unexpected dataset header")
        wavelengths = np.asarray([float(x) for x in header[3:]])
        ids: list[str] = []
        truths: list[frozenset[str]] = []
        rows: list[list[float]] = []
        model = ""
        for ln, row in enumerate(reader, start=2):
            if len(row) != 3 + wavelengths.size:
                raise ValueError(f"{path}:{ln}: ragged row")
            ids.append(row[0])
            model = row[1]
            truths.append(frozenset(row[2].split(";")))
            rows.append([float(x) for x in row[3:]])
    return model, ids, truths, wavelengths, np.asarray(rows)
