"""Pipeline stages behind the command-line interface.

``simulate`` builds the library, splits it, synthesizes mixture datasets
and nonlinearity records.  ``train`` fits chain models and detector banks
(all four ablation variants).  ``detect`` labels test pixels, scores them
against every bank, and runs the sparse baselines.  ``evaluate`` sweeps the
parameter grids into ROC meshes and writes the report CSVs.  ``report``
chains all four stages in memory.

Every stage is a pure function of the :class:`~endmix.config.RunConfig`;
output files start with a ``#`` header carrying the tool version and the
config hash, and reruns reproduce them byte for byte.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .archive import load_bank_archive, save_bank_archive
from .config import RunConfig, TOOL_VERSION, config_hash
from .detector import (
    DetectorBank,
    augment_library,
    build_feature_dataset,
    eliminate_negative_features,
    feature_report,
    select_features_cmi,
    train_naive_bayes,
)
from .evaluation import (
    NsRecord,
    RocMesh,
    RocPoint,
    bin_by_ns,
    nonlinearity_score,
)
from .mixing import (
    HapkeGeometry,
    MixtureDataset,
    NoiseSpec,
    generate_mixture_set,
    load_mixture_dataset,
    save_mixture_dataset,
)
from .nhmc import EmConfig, NhmcModel, label_features, train_nhmc
from .sparse import AdmmConfig, clsunsal, default_threshold_grid, sunsal_batch
from .spectral import (
    SpectralLibrary,
    _format_float,
    equalize_classes_hapke,
    generate_synthetic_library,
    load_library,
    save_library,
    split_train_test_kmeans,
)
from .wavelet import uwt

__all__ = [
    "VARIANTS",
    "MAIN_VARIANT",
    "SimulateResult",
    "TrainResult",
    "DetectResult",
    "EvaluateResult",
    "PixelBatch",
    "output_header",
    "build_library",
    "prepare_split",
    "run_simulate",
    "run_train",
    "run_detect",
    "run_evaluate",
    "run_report",
    "load_pixel_batch",
    "load_detect_outputs",
    "load_ns_records",
]

# ablation arms: plain naive Bayes classifies on every feature label
# directly (no augmentation, no elimination, no greedy selection); the other
# arms all use greedy selection and toggle library augmentation (la) and
# negative-feature elimination (ncfe) independently
VARIANT_FLAGS: dict[str, tuple[bool, bool, bool]] = {
    # name: (augment, eliminate, select)
    "nb": (False, False, False),
    "ncfe_nb": (False, True, True),
    "la_nb": (True, False, True),
    "ncfe_la_nb": (True, True, True),
}
VARIANTS = tuple(VARIANT_FLAGS)
MAIN_VARIANT = "ncfe_la_nb"


def output_header(cfg: RunConfig) -> list[str]:
    return [f"endmix v{TOOL_VERSION} config={config_hash(cfg)}"]


def _write_csv(
    path: Path, header_lines: Iterable[str], columns: Sequence[str], rows: Iterable[Sequence]
) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(str(x) for x in row) + "\n")


def _fmt(x: float) -> str:
    return _format_float(float(x))


def _read_csv_rows(path: Path) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        return [row for row in csv.reader(line for line in fh if not line.startswith("#"))]


def build_library(cfg: RunConfig) -> SpectralLibrary:
    if cfg.library_source == "file":
        return load_library(cfg.library_path)
    return generate_synthetic_library(
        cfg.n_classes, cfg.samples_per_class, cfg.n_channels, cfg.library_seed
    )


def prepare_split(
    cfg: RunConfig, lib: SpectralLibrary | None = None
) -> tuple[SpectralLibrary, SpectralLibrary]:
    if lib is None:
        lib = build_library(cfg)
    train, test = split_train_test_kmeans(lib, cfg.split_seed)
    if cfg.equalize_target:
        geometry = (cfg.hapke_incidence_deg, cfg.hapke_emergence_deg)
        train = equalize_classes_hapke(train, cfg.equalize_target, geometry, seed=cfg.split_seed)
    return train, test


# ----------------------------------------------------------------- simulate


@dataclass
class SimulateResult:
    train: SpectralLibrary
    test: SpectralLibrary
    datasets: dict[str, MixtureDataset]
    ns_records: dict[str, list[NsRecord]]


def _ns_records(train: SpectralLibrary, ds: MixtureDataset) -> list[NsRecord]:
    """Nonlinearity score of every observed pixel against the training
    samples of its true classes."""
    cache: dict[frozenset, tuple[str, np.ndarray]] = {}
    records = []
    for pid, spectrum, truth in zip(ds.ids, ds.spectra, ds.true_classes):
        if truth not in cache:
            cols = []
            for cls in sorted(truth):
                cols.extend(train.samples[i].reflectance for i in train.class_index[cls])
            cache[truth] = ("+".join(sorted(truth)), np.stack(cols, axis=1))
        matrix_id, W = cache[truth]
        res = nonlinearity_score(spectrum, W)
        records.append(NsRecord(pid, res.ns_deg, matrix_id, res.degenerate))
    return records


def run_simulate(cfg: RunConfig, out_dir: str | Path | None = None) -> SimulateResult:
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = output_header(cfg)
    train, test = prepare_split(cfg)
    save_library(out / "library_train.csv", train, header)
    save_library(out / "library_test.csv", test, header)

    geometry = HapkeGeometry(cfg.hapke_incidence_deg, cfg.hapke_emergence_deg)
    datasets: dict[str, MixtureDataset] = {}
    ns_records: dict[str, list[NsRecord]] = {}
    for model in cfg.models:
        ds = generate_mixture_set(
            test,
            model,
            cfg.n_endmembers,
            cfg.n_combos,
            cfg.n_weights,
            NoiseSpec(cfg.snr_db, cfg.mixing_seed),
            seed=cfg.mixing_seed,
            geometry=geometry,
        )
        save_mixture_dataset(
            out / f"mixtures_{model}.csv",
            ds,
            header,
            sidecar_path=out / f"mixspecs_{model}.csv",
        )
        records = _ns_records(train, ds)
        _write_csv(
            out / f"ns_{model}.csv",
            header,
            ["id", "ns_deg", "degenerate", "endmember_matrix"],
            (
                [r.pixel_id, _fmt(r.ns_deg), int(r.degenerate), r.matrix_id]
                for r in records
            ),
        )
        datasets[model] = ds
        ns_records[model] = records
    return SimulateResult(train, test, datasets, ns_records)


# -------------------------------------------------------------------- train


@dataclass
class TrainResult:
    banks_by_k: dict[int, dict[str, DetectorBank]]
    archive_paths: dict[int, Path]


def _train_variant_banks(
    cfg: RunConfig, train_lib: SpectralLibrary, nhmc_model: NhmcModel
) -> dict[str, DetectorBank]:
    """All four ablation banks sharing one chain model.

    Labels are computed once on the augmented library; the unaugmented
    variants reuse the factor-1.0 subset.
    """
    grid = tuple(cfg.attenuation_grid)
    aug = augment_library(train_lib, grid)
    labelled_aug = [
        (s.class_label, label_features(nhmc_model, uwt(s, nhmc_model.n_scales, nhmc_model.mother)))
        for s in aug.samples
    ]
    if 1.0 in grid:
        g10, G = grid.index(1.0), len(grid)
        labelled_raw = [labelled_aug[i * G + g10] for i in range(train_lib.n_samples)]
    else:
        labelled_raw = [
            (s.class_label, label_features(nhmc_model, uwt(s, nhmc_model.n_scales, nhmc_model.mother)))
            for s in train_lib.samples
        ]

    banks: dict[str, DetectorBank] = {}
    for name, (use_aug, eliminate, select) in VARIANT_FLAGS.items():
        labelled = labelled_aug if use_aug else labelled_raw
        detectors = []
        for cls in train_lib.classes:
            ds = build_feature_dataset(labelled, cls)
            if eliminate:
                candidates = eliminate_negative_features(ds)
            else:
                candidates = np.arange(ds.n_features)
            if select and candidates.size:
                chosen = select_features_cmi(ds, candidates, cfg.max_features)
            else:
                chosen = [int(c) for c in candidates]
            detectors.append(train_naive_bayes(ds, chosen, class_id=cls, alpha=cfg.nb_alpha))
        banks[name] = DetectorBank(
            detectors=tuple(detectors),
            nhmc=nhmc_model,
            attenuation_grid=grid if use_aug else (1.0,),
            wavelengths=np.asarray(train_lib.wavelengths, dtype=float),
        )
    return banks


def run_train(
    cfg: RunConfig,
    train_lib: SpectralLibrary | None = None,
    out_dir: str | Path | None = None,
) -> TrainResult:
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = output_header(cfg)
    if train_lib is None:
        train_lib, _ = prepare_split(cfg)
    matrices = [uwt(s, cfg.n_scales) for s in train_lib.samples]
    em_cfg = EmConfig(tol=cfg.em_tol, max_iters=cfg.em_max_iters)

    banks_by_k: dict[int, dict[str, DetectorBank]] = {}
    paths: dict[int, Path] = {}
    for k in cfg.k_grid:
        nhmc_model = train_nhmc(matrices, k, em_cfg)
        banks = _train_variant_banks(cfg, train_lib, nhmc_model)
        path = out / f"model_k{k}.json"
        save_bank_archive(path, banks, header)
        rows = feature_report(banks[MAIN_VARIANT])
        _write_csv(
            out / f"features_k{k}.csv",
            header,
            ["class", "rank", "scale", "channel", "wavelength_nm"],
            (
                [r["class"], r["rank"], r["scale"], r["channel"], _fmt(r["wavelength_nm"])]
                for r in rows
            ),
        )
        banks_by_k[k] = banks
        paths[k] = path
    return TrainResult(banks_by_k, paths)


# ------------------------------------------------------------------- detect


@dataclass(frozen=True)
class PixelBatch:
    """The slice of a mixture dataset the detect stage needs.

    Mirrors the relevant attributes of
    :class:`~endmix.mixing.MixtureDataset`, so datasets reloaded from CSV
    (which lack recipes and pre-noise spectra) can flow through
    :func:`run_detect` unchanged.
    """

    spectra: tuple
    true_classes: tuple[frozenset[str], ...]
    ids: tuple[str, ...]

    @property
    def wavelengths(self) -> np.ndarray:
        return self.spectra[0].wavelengths

    def reflectance_matrix(self) -> np.ndarray:
        return np.stack([s.reflectance for s in self.spectra], axis=1)


def load_pixel_batch(path: str | Path) -> tuple[str, PixelBatch]:
    """Read a mixtures CSV back into a detect-ready batch."""
    from .spectral import Spectrum

    model, ids, truths, wavelengths, refl = load_mixture_dataset(path)
    spectra = tuple(
        Spectrum(wavelengths, row, allow_negative=True) for row in refl
    )
    return model, PixelBatch(spectra, tuple(truths), tuple(ids))


@dataclass
class DetectResult:
    classes: tuple[str, ...]
    pixel_ids: dict[str, tuple[str, ...]]
    truths: dict[str, dict[str, frozenset]]
    # model -> k -> (n_pixels, n_scales * L) uint8
    labels: dict[str, dict[int, np.ndarray]] = field(default_factory=dict)
    # model -> k -> variant -> (n_pixels, n_classes, max_features) bool
    decisions: dict[str, dict[int, dict[str, np.ndarray]]] = field(default_factory=dict)
    # model -> method -> lambda -> (n_classes, n_pixels) best abundance per class
    class_abundance: dict[str, dict[str, dict[float, np.ndarray]]] = field(default_factory=dict)


def _margins_cube(
    bank: DetectorBank, flat_labels: np.ndarray, max_features: int, prefixes: bool = True
) -> np.ndarray:
    """Per-pixel margins, shape (n, C, K).

    With ``prefixes`` the K axis sweeps feature-count prefixes 1..K of the
    selection order (short selections repeat their final margin); without
    it the K axis collapses to the single all-features margin.
    """
    n = flat_labels.shape[0]
    if not prefixes:
        cube = np.empty((n, len(bank.detectors), 1))
        for ci, det in enumerate(bank.detectors):
            cube[:, ci, 0] = det.margin_batch(flat_labels)
        return cube
    cube = np.empty((n, len(bank.detectors), max_features))
    for ci, det in enumerate(bank.detectors):
        if det.n_features == 0:
            cube[:, ci, :] = det.log_prior_pos - det.log_prior_neg
            continue
        m = det.margins_by_prefix(flat_labels)
        if m.shape[1] < max_features:
            m = np.pad(m, ((0, 0), (0, max_features - m.shape[1])), mode="edge")
        cube[:, ci, :] = m[:, :max_features]
    return cube


def _class_rows(train_lib: SpectralLibrary) -> dict[str, np.ndarray]:
    return {cls: np.asarray(idx) for cls, idx in train_lib.class_index.items()}


def run_detect(
    cfg: RunConfig,
    banks_by_k: Mapping[int, Mapping[str, DetectorBank]],
    datasets: Mapping[str, MixtureDataset],
    train_lib: SpectralLibrary,
    out_dir: str | Path | None = None,
) -> DetectResult:
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = output_header(cfg)
    classes = train_lib.classes
    rows_by_class = _class_rows(train_lib)
    W_train = train_lib.reflectance_matrix.T  # (L, m): samples as columns
    expected_channels = train_lib.n_channels

    result = DetectResult(
        classes=classes,
        pixel_ids={m: ds.ids for m, ds in datasets.items()},
        truths={m: dict(zip(ds.ids, ds.true_classes)) for m, ds in datasets.items()},
    )

    for model_name, ds in datasets.items():
        if ds.wavelengths.size != expected_channels:
            raise ValueError(
                f"dataset {model_name} has {ds.wavelengths.size} channels, "
                f"bank expects {expected_channels}"
            )
        uwts = [uwt(s, cfg.n_scales) for s in ds.spectra]
        result.labels[model_name] = {}
        result.decisions[model_name] = {}
        for k, banks in banks_by_k.items():
            nhmc_model = banks[MAIN_VARIANT].nhmc
            flats = np.stack(
                [label_features(nhmc_model, m).flatten() for m in uwts]
            ).astype(np.uint8)
            result.labels[model_name][k] = flats
            _write_csv(
                out / f"labels_{model_name}_k{k}.csv",
                header,
                ["id", "labels"],
                (
                    [pid, "".join("1" if b else "0" for b in row)]
                    for pid, row in zip(ds.ids, flats)
                ),
            )
            result.decisions[model_name][k] = {}
            for variant, bank in banks.items():
                select = VARIANT_FLAGS[variant][2]
                cube = _margins_cube(bank, flats, cfg.max_features, prefixes=select)
                result.decisions[model_name][k][variant] = cube > 0
                if variant == MAIN_VARIANT:
                    final = cube[:, :, -1]
                    cols = (
                        ["id", "unknown"]
                        + [f"margin_{c}" for c in classes]
                        + [f"decision_{c}" for c in classes]
                    )
                    rows = []
                    for i, pid in enumerate(ds.ids):
                        dec = final[i] > 0
                        rows.append(
                            [pid, int(not dec.any())]
                            + [_fmt(v) for v in final[i]]
                            + [int(d) for d in dec]
                        )
                    _write_csv(out / f"decisions_{model_name}_k{k}.csv", header, cols, rows)

        # sparse baselines operate on raw reflectance, once per model
        Y = ds.reflectance_matrix()
        admm = dict(rho=cfg.admm_rho, max_iters=cfg.admm_max_iters,
                    tol_primal=cfg.admm_tol, tol_dual=cfg.admm_tol)
        result.class_abundance[model_name] = {"sunsal": {}, "clsunsal": {}}
        for lam in cfg.sunsal_lambdas:
            A, flag = sunsal_batch(W_train, Y, AdmmConfig(lam=lam, **admm))
            _write_abundances(
                out / f"abundances_sunsal_{model_name}_lam{lam:g}.csv",
                header, ds.ids, train_lib.sample_ids, A, flag,
            )
            result.class_abundance[model_name]["sunsal"][lam] = _class_max(A, rows_by_class, classes)
        for lam in cfg.clsunsal_lambdas:
            A, flag = clsunsal(W_train, Y, AdmmConfig(lam=lam, **admm))
            _write_abundances(
                out / f"abundances_clsunsal_{model_name}_lam{lam:g}.csv",
                header, ds.ids, train_lib.sample_ids, A, flag,
            )
            result.class_abundance[model_name]["clsunsal"][lam] = _class_max(A, rows_by_class, classes)
    return result


def _class_max(
    A: np.ndarray, rows_by_class: Mapping[str, np.ndarray], classes: Sequence[str]
) -> np.ndarray:
    """Largest abundance over each class's library samples, (C, n_pixels)."""
    return np.stack([A[rows_by_class[cls]].max(axis=0) for cls in classes])


def _write_abundances(path, header, pixel_ids, sample_ids, A, converged: bool) -> None:
    _write_csv(
        path,
        header,
        ["id", "converged"] + list(sample_ids),
        (
            [pid, int(converged)] + [_fmt(v) for v in A[:, i]]
            for i, pid in enumerate(pixel_ids)
        ),
    )


# ----------------------------------------------------------------- evaluate


@dataclass
class EvaluateResult:
    # (model, method) -> (d_roc, best-point params)
    summary: dict[tuple[str, str], tuple[float, dict]]
    meshes: dict[tuple[str, str], RocMesh]


def _truth_bool(
    truth: Mapping[str, frozenset], pixel_ids: Sequence[str], classes: Sequence[str]
) -> np.ndarray:
    return np.array(
        [[cls in truth[pid] for cls in classes] for pid in pixel_ids], dtype=bool
    )


def _mesh_from_decision_stack(
    params_list: Sequence[dict],
    decision_stack: Sequence[np.ndarray],
    truth: np.ndarray,
    exclude_unknown: bool,
) -> RocMesh:
    """Vectorized tally: one (R, FAR) point per decision array (n, C)."""
    points = []
    for params, D in zip(params_list, decision_stack):
        T = truth
        if exclude_unknown:
            keep = D.any(axis=1)
            if not keep.any():
                continue
            D, T = D[keep], T[keep]
        tp = int(np.sum(D & T))
        fp = int(np.sum(D & ~T))
        fn = int(np.sum(~D & T))
        tn = int(np.sum(~D & ~T))
        if tp + fn == 0 or fp + tn == 0:
            continue
        points.append(
            RocPoint(tuple(sorted(params.items())), tp / (tp + fn), fp / (fp + tn))
        )
    if not points:
        raise ValueError("no valid operating points on the grid")
    return RocMesh(tuple(points))


def _best_point(mesh: RocMesh) -> tuple[float, RocPoint]:
    best = min(
        mesh.points,
        key=lambda p: ((1.0 - p.recall) ** 2 + p.far**2, p.params),
    )
    return float(np.hypot(1.0 - best.recall, best.far)), best


def _nhmc_grid(
    decisions_k: Mapping[int, Mapping[str, np.ndarray]], variant: str
) -> tuple[list[dict], list[np.ndarray]]:
    """(params, decisions) pairs; the prefix count K appears only for
    variants that select features (plain NB has one point per k)."""
    params_list, stack = [], []
    for k in sorted(decisions_k):
        cube = decisions_k[k][variant]
        if cube.shape[2] == 1:
            params_list.append({"k": k})
            stack.append(cube[:, :, 0])
            continue
        for K in range(1, cube.shape[2] + 1):
            params_list.append({"k": k, "K": K})
            stack.append(cube[:, :, K - 1])
    return params_list, stack


def _su_grid(
    class_abundance: Mapping[float, np.ndarray], thresholds: np.ndarray
) -> tuple[list[dict], list[np.ndarray]]:
    params_list, stack = [], []
    for lam in class_abundance:
        best = class_abundance[lam]  # (C, n)
        for tau in thresholds:
            params_list.append({"lam": lam, "tau": float(tau)})
            stack.append(best.T > tau)
    return params_list, stack


def _per_class_rows(
    model: str,
    method: str,
    best: RocPoint,
    decisions: np.ndarray,
    truth: np.ndarray,
    classes: Sequence[str],
) -> list[list]:
    rows = []
    for ci, cls in enumerate(classes):
        d, t = decisions[:, ci], truth[:, ci]
        tp = int(np.sum(d & t))
        fp = int(np.sum(d & ~t))
        fn = int(np.sum(~d & t))
        tn = int(np.sum(~d & ~t))
        recall = _fmt(tp / (tp + fn)) if tp + fn else ""
        far = _fmt(fp / (fp + tn)) if fp + tn else ""
        rows.append([model, method, cls, recall, far])
    return rows


def _decisions_at(params: dict, decisions_k, variant, class_abundance) -> np.ndarray:
    if "k" in params:
        cube = decisions_k[params["k"]][variant]
        return cube[:, :, params.get("K", 1) - 1]
    return class_abundance[params["lam"]].T > params["tau"]


def run_evaluate(
    cfg: RunConfig,
    detect: DetectResult,
    ns_records: Mapping[str, Sequence[NsRecord]] | None = None,
    out_dir: str | Path | None = None,
) -> EvaluateResult:
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = output_header(cfg)
    classes = detect.classes
    thresholds = default_threshold_grid(cfg.n_thresholds)

    summary: dict[tuple[str, str], tuple[float, dict]] = {}
    meshes: dict[tuple[str, str], RocMesh] = {}
    per_class_rows: list[list] = []

    for model in detect.pixel_ids:
        pixel_ids = detect.pixel_ids[model]
        truth = _truth_bool(detect.truths[model], pixel_ids, classes)
        methods: dict[str, tuple[list[dict], list[np.ndarray]]] = {}
        for variant in VARIANTS:
            methods[variant] = _nhmc_grid(detect.decisions[model], variant)
        for su in ("sunsal", "clsunsal"):
            methods[su] = _su_grid(detect.class_abundance[model][su], thresholds)

        for method, (params_list, stack) in methods.items():
            mesh = _mesh_from_decision_stack(params_list, stack, truth, cfg.exclude_unknown)
            meshes[(model, method)] = mesh
            _write_csv(
                out / f"mesh_{model}_{method}.csv",
                header,
                ["params", "recall", "far"],
                (
                    [
                        ";".join(f"{k}={v:g}" if isinstance(v, float) else f"{k}={v}"
                                 for k, v in p.params),
                        _fmt(p.recall),
                        _fmt(p.far),
                    ]
                    for p in mesh.points
                ),
            )
            dist, best = _best_point(mesh)
            summary[(model, method)] = (dist, best.params_dict)
            best_dec = _decisions_at(
                best.params_dict,
                detect.decisions[model],
                method if method in VARIANTS else None,
                detect.class_abundance[model].get(method, {}),
            )
            per_class_rows.extend(
                _per_class_rows(model, method, best, best_dec, truth, classes)
            )

    _write_csv(
        out / "summary.csv",
        header,
        ["model", "method", "d_roc", "best_params"],
        (
            [model, method, _fmt(dist),
             ";".join(f"{k}={v:g}" if isinstance(v, float) else f"{k}={v}"
                      for k, v in sorted(params.items()))]
            for (model, method), (dist, params) in summary.items()
        ),
    )
    _write_csv(
        out / "per_class.csv",
        header,
        ["model", "method", "class", "recall", "far"],
        per_class_rows,
    )

    if ns_records:
        _write_ns_reports(cfg, detect, ns_records, thresholds, out, header)

    return EvaluateResult(summary, meshes)


def _write_ns_reports(cfg, detect, ns_records, thresholds, out: Path, header) -> None:
    """Histogram of scores per model, plus pooled per-bin d_ROC."""
    edges = cfg.ns_bin_edges
    hist_rows = []
    pooled: list[NsRecord] = []
    for model, records in ns_records.items():
        groups = bin_by_ns(records, edges)
        for lo, hi, ids in groups:
            hist_rows.append([model, _fmt(lo), _fmt(hi), len(ids)])
        pooled.extend(
            NsRecord(f"{model}:{r.pixel_id}", r.ns_deg, r.matrix_id, r.degenerate)
            for r in records
        )
    _write_csv(out / "ns_histogram.csv", header,
               ["model", "bin_lo", "bin_hi", "count"], hist_rows)

    # pooled pixels regrouped by score; d_ROC per bin for three methods
    index: dict[str, dict[str, int]] = {
        model: {pid: i for i, pid in enumerate(detect.pixel_ids[model])}
        for model in detect.pixel_ids
    }
    methods = [MAIN_VARIANT, "sunsal", "clsunsal"]
    bin_rows = []
    for lo, hi, ids in bin_by_ns(pooled, edges):
        row: list = [_fmt(lo), _fmt(hi), len(ids)]
        members: dict[str, list[int]] = {}
        for tagged in ids:
            model, pid = tagged.split(":", 1)
            members.setdefault(model, []).append(index[model][pid])
        for method in methods:
            if not ids:
                row.append("")
                continue
            params_list: list[dict] | None = None
            stacks: list[list[np.ndarray]] = []
            truths: list[np.ndarray] = []
            for model, rows_idx in members.items():
                sel = np.asarray(rows_idx)
                truth = _truth_bool(
                    detect.truths[model],
                    [detect.pixel_ids[model][i] for i in rows_idx],
                    detect.classes,
                )
                if method in VARIANTS:
                    plist, stack = _nhmc_grid(detect.decisions[model], method)
                else:
                    plist, stack = _su_grid(
                        detect.class_abundance[model][method], thresholds
                    )
                stacks.append([d[sel] for d in stack])
                truths.append(truth)
                params_list = plist
            joined = [np.concatenate(parts) for parts in zip(*stacks)]
            truth_all = np.concatenate(truths)
            try:
                mesh = _mesh_from_decision_stack(
                    params_list, joined, truth_all, cfg.exclude_unknown
                )
                row.append(_fmt(d_roc_of(mesh)))
            except ValueError:
                row.append("")
        bin_rows.append(row)
    _write_csv(
        out / "ns_binned_droc.csv",
        header,
        ["bin_lo", "bin_hi", "n_pixels"] + [f"d_roc_{m}" for m in methods],
        bin_rows,
    )


def d_roc_of(mesh: RocMesh) -> float:
    return _best_point(mesh)[0]


# ------------------------------------------------------------------- report


def run_report(cfg: RunConfig, out_dir: str | Path | None = None) -> EvaluateResult:
    """Full pipeline: simulate, train, detect, evaluate, in one process."""
    sim = run_simulate(cfg, out_dir)
    trained = run_train(cfg, sim.train, out_dir)
    detected = run_detect(cfg, trained.banks_by_k, sim.datasets, sim.train, out_dir)
    return run_evaluate(cfg, detected, sim.ns_records, out_dir)


# --------------------------------------------------- stage-wise file loading


def load_detect_outputs(cfg: RunConfig, out_dir: str | Path | None = None) -> DetectResult:
    """Rebuild a :class:`DetectResult` from the files ``detect`` wrote.

    Used by the standalone ``evaluate`` command; margins are recomputed
    from the stored label matrices and model archives, which reproduces the
    in-memory pipeline exactly.
    """
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    train_path = out / "library_train.csv"
    if not train_path.exists():
        raise ValueError(f"missing training library {train_path}; run simulate first")
    train = load_library(train_path)
    rows_by_class = _class_rows(train)
    classes = train.classes

    banks_by_k: dict[int, dict[str, DetectorBank]] = {}
    for k in cfg.k_grid:
        path = out / f"model_k{k}.json"
        if not path.exists():
            raise ValueError(f"missing model archive {path}; run train first")
        banks_by_k[k] = load_bank_archive(path)

    result: DetectResult | None = None
    for model in cfg.models:
        mix_path = out / f"mixtures_{model}.csv"
        if not mix_path.exists():
            raise ValueError(f"missing dataset {mix_path}; run simulate first")
        _, ids, truths, _, refl = load_mixture_dataset(mix_path)
        if result is None:
            result = DetectResult(classes=classes, pixel_ids={}, truths={})
        result.pixel_ids[model] = tuple(ids)
        result.truths[model] = dict(zip(ids, truths))
        result.labels[model] = {}
        result.decisions[model] = {}
        for k, banks in banks_by_k.items():
            label_path = out / f"labels_{model}_k{k}.csv"
            if not label_path.exists():
                raise ValueError(f"missing label file {label_path}; run detect first")
            rows = _read_csv_rows(label_path)
            flats = np.stack(
                [np.frombuffer(r[1].encode(), dtype=np.uint8) - ord("0") for r in rows[1:]]
            ).astype(np.uint8)
            result.labels[model][k] = flats
            result.decisions[model][k] = {}
            for variant, bank in banks.items():
                select = VARIANT_FLAGS[variant][2]
                cube = _margins_cube(bank, flats, cfg.max_features, prefixes=select)
                result.decisions[model][k][variant] = cube > 0
        result.class_abundance[model] = {"sunsal": {}, "clsunsal": {}}
        for method, lams in (("sunsal", cfg.sunsal_lambdas), ("clsunsal", cfg.clsunsal_lambdas)):
            for lam in lams:
                ab_path = out / f"abundances_{method}_{model}_lam{lam:g}.csv"
                if not ab_path.exists():
                    raise ValueError(f"missing abundance file {ab_path}; run detect first")
                rows = _read_csv_rows(ab_path)
                A = np.array([[float(x) for x in r[2:]] for r in rows[1:]]).T
                result.class_abundance[model][method][lam] = _class_max(
                    A, rows_by_class, classes
                )
    assert result is not None
    return result


def load_ns_records(cfg: RunConfig, out_dir: str | Path | None = None) -> dict[str, list[NsRecord]]:
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    records: dict[str, list[NsRecord]] = {}
    for model in cfg.models:
        path = out / f"ns_{model}.csv"
        if not path.exists():
            raise ValueError(f"missing score file {path}; run simulate first")
        rows = _read_csv_rows(path)
        records[model] = [
            NsRecord(r[0], float(r[1]), r[3], bool(int(r[2]))) for r in rows[1:]
        ]
    return records
