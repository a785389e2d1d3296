"""Model persistence.

Banks of trained detectors (with their shared chain model) are stored as
JSON preceded by ``#`` comment lines carrying the config hash and tool
version.  Floats are serialized by ``repr`` (shortest round-trip form), so
a load followed by a save reproduces parameters bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .detector import DetectorBank, DetectorModel
from .nhmc import NhmcModel, NhmcTrainingInfo

__all__ = [
    "ARCHIVE_FORMAT",
    "ARCHIVE_VERSION",
    "save_bank_archive",
    "load_bank_archive",
]

ARCHIVE_FORMAT = "endmix-model-archive"
ARCHIVE_VERSION = 1


def _nhmc_to_dict(model: NhmcModel) -> dict:
    info = model.training
    return {
        "mother": model.mother,
        "initial": model.initial.tolist(),
        "transitions": model.transitions.tolist(),
        "variances": model.variances.tolist(),
        "training": {
            "iterations": np.asarray(info.iterations).tolist(),
            "final_log_likelihood": np.asarray(info.final_log_likelihood).tolist(),
            "variance_floors": np.asarray(info.variance_floors).tolist(),
            "degenerate_offsets": list(info.degenerate_offsets),
        },
    }


def _nhmc_from_dict(d: dict) -> NhmcModel:
    tr = d["training"]
    info = NhmcTrainingInfo(
        iterations=np.asarray(tr["iterations"], dtype=int),
        final_log_likelihood=np.asarray(tr["final_log_likelihood"], dtype=float),
        variance_floors=np.asarray(tr["variance_floors"], dtype=float),
        degenerate_offsets=tuple(int(i) for i in tr["degenerate_offsets"]),
        ll_history=None,
    )
    model = NhmcModel(
        initial=np.asarray(d["initial"], dtype=float),
        transitions=np.asarray(d["transitions"], dtype=float),
        variances=np.asarray(d["variances"], dtype=float),
        mother=d["mother"],
        training=info,
    )
    model.validate()
    return model


def _detector_to_dict(det: DetectorModel) -> dict:
    return {
        "class_id": det.class_id,
        "selected": det.selected.tolist(),
        "prob_pos": det.prob_pos.tolist(),
        "prob_neg": det.prob_neg.tolist(),
        "log_prior_pos": det.log_prior_pos,
        "log_prior_neg": det.log_prior_neg,
    }


def _detector_from_dict(d: dict) -> DetectorModel:
    return DetectorModel(
        class_id=d["class_id"],
        selected=np.asarray(d["selected"], dtype=int),
        prob_pos=np.asarray(d["prob_pos"], dtype=float),
        prob_neg=np.asarray(d["prob_neg"], dtype=float),
        log_prior_pos=float(d["log_prior_pos"]),
        log_prior_neg=float(d["log_prior_neg"]),
    )


def save_bank_archive(
    path: str | Path,
    banks: Mapping[str, DetectorBank],
    header_lines: Iterable[str] = (),
) -> None:
    """Write one or more detector banks that share a single chain model.

    ``banks`` maps a variant name (e.g. ``"ncfe_la_nb"``) to its bank.  The
    chain model is stored once; a mismatch between banks is an error.
    """
    banks = dict(banks)
    if not banks:
        raise ValueError("no banks to save")
    first = next(iter(banks.values()))
    for bank in banks.values():
        if bank.nhmc is not first.nhmc:
            raise ValueError("banks in one archive must share the chain model")
    payload = {
        "format": ARCHIVE_FORMAT,
        "version": ARCHIVE_VERSION,
        "nhmc": _nhmc_to_dict(first.nhmc),
        "wavelengths": np.asarray(first.wavelengths).tolist(),
        "banks": {
            name: {
                "attenuation_grid": list(bank.attenuation_grid),
                "detectors": [_detector_to_dict(d) for d in bank.detectors],
            }
            for name, bank in banks.items()
        },
    }
    with open(Path(path), "w", encoding="utf-8", newline="\n") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        json.dump(payload, fh, indent=1, sort_keys=False)
        fh.write("\n")


def load_bank_archive(path: str | Path) -> dict[str, DetectorBank]:
    """Read back an archive; all banks share one chain model instance."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        body = "".join(line for line in fh if not line.startswith("#"))
    payload = json.loads(body)
    if payload.get("format") != ARCHIVE_FORMAT:
        raise ValueError(f"{path}: not a model archive")
    if payload.get("version") != ARCHIVE_VERSION:
        raise ValueError(f"{path}: unsupported archive version {payload.get('version')!r}")
    nhmc = _nhmc_from_dict(payload["nhmc"])
    wavelengths = np.asarray(payload["wavelengths"], dtype=float)
    out = {}
    for name, entry in payload["banks"].items():
        out[name] = DetectorBank(
            detectors=tuple(_detector_from_dict(d) for d in entry["detectors"]),
            nhmc=nhmc,
            attenuation_grid=tuple(float(g) for g in entry["attenuation_grid"]),
            wavelengths=wavelengths,
        )
    return out
