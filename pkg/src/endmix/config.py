"""Run configuration: INI-file loading, canonical dumping, and hashing.

A :class:`RunConfig` fully determines a pipeline run (including every RNG
seed), so rerunning with an identical config reproduces every output file
byte for byte.  The canonical dump's SHA-256 prefix is stamped into output
headers for traceability.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .mixing import MIXING_MODELS

__all__ = ["RunConfig", "load_config", "dump_config", "config_hash"]

TOOL_VERSION = "0.1.0"


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _names(text: str) -> tuple[str, ...]:
    return tuple(x for x in text.replace(",", " ").split())


@dataclass(frozen=True)
class RunConfig:
    """Everything a full pipeline run needs, with desk-scale defaults."""

    # [library]
    library_source: str = "synthetic"  # "synthetic" or "file"
    library_path: str = ""
    n_classes: int = 8
    samples_per_class: int = 20
    n_channels: int = 256
    library_seed: int = 7

    # [split]
    split_seed: int = 0
    equalize_target: int = 0  # 0 disables within-class Hapke equalization

    # [mixing]
    models: tuple[str, ...] = ("LMM", "FM", "NM", "GBM", "PPNM", "SM", "HM")
    n_endmembers: int = 3
    n_combos: int = 10
    n_weights: int = 50
    snr_db: float = 50.0
    mixing_seed: int = 11
    hapke_incidence_deg: float = 30.0
    hapke_emergence_deg: float = 0.0

    # [nhmc]
    k_grid: tuple[int, ...] = (2, 4)
    n_scales: int = 10
    em_tol: float = 1e-6
    em_max_iters: int = 200

    # [detector]
    attenuation_grid: tuple[float, ...] = tuple((i + 1) / 10 for i in range(10))
    max_features: int = 50
    nb_alpha: float = 0.5

    # [baseline]
    sunsal_lambdas: tuple[float, ...] = (0.0, 1e-4, 1e-2, 1e-1)
    clsunsal_lambdas: tuple[float, ...] = (1e-4, 5e-4, 1e-2, 1e-1)
    n_thresholds: int = 70
    admm_rho: float = 1.0
    admm_max_iters: int = 1000
    admm_tol: float = 1e-6

    # [evaluation]
    exclude_unknown: bool = False
    ns_bin_edges: tuple[float, ...] = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 10.0, 90.0)

    # [output]
    out_dir: str = "out"

    def __post_init__(self) -> None:
        if self.library_source not in ("synthetic", "file"):
            raise ValueError("library_source must be 'synthetic' or 'file'")
        if self.library_source == "file" and not self.library_path:
            raise ValueError("library_source 'file' needs library_path")
        for name in ("models", "k_grid", "attenuation_grid", "sunsal_lambdas",
                     "clsunsal_lambdas", "ns_bin_edges"):
            if not getattr(self, name):
                raise ValueError(f"{name} must not be empty")
        for m in self.models:
            if m not in MIXING_MODELS:
                raise ValueError(f"unknown mixing model {m!r} in config")
        if any(k < 2 for k in self.k_grid):
            raise ValueError("k_grid entries must be at least 2")
        if self.max_features < 1 or self.n_thresholds < 1:
            raise ValueError("max_features and n_thresholds must be positive")


_SECTIONS: dict[str, tuple[str, ...]] = {
    "library": ("library_source", "library_path", "n_classes", "samples_per_class",
                "n_channels", "library_seed"),
    "split": ("split_seed", "equalize_target"),
    "mixing": ("models", "n_endmembers", "n_combos", "n_weights", "snr_db",
               "mixing_seed", "hapke_incidence_deg", "hapke_emergence_deg"),
    "nhmc": ("k_grid", "n_scales", "em_tol", "em_max_iters"),
    "detector": ("attenuation_grid", "max_features", "nb_alpha"),
    "baseline": ("sunsal_lambdas", "clsunsal_lambdas", "n_thresholds",
                 "admm_rho", "admm_max_iters", "admm_tol"),
    "evaluation": ("exclude_unknown", "ns_bin_edges"),
    "output": ("out_dir",),
}


def dump_config(cfg: RunConfig) -> str:
    """Canonical INI text: fixed section/key order, repr'd numbers."""
    lines = []
    by_name = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            value = by_name[key]
            if isinstance(value, tuple):
                text = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{key} = {text}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: RunConfig) -> str:
    """First 12 hex digits of the SHA-256 of the canonical dump.

    The [output] section is excluded: where results are written has no
    bearing on what they contain.
    """
    kept, skip = [], False
    for line in dump_config(cfg).splitlines():
        if line.startswith("["):
            skip = line == "[output]"
        if not skip:
            kept.append(line)
    return hashlib.sha256("\n".join(kept).encode("utf-8")).hexdigest()[:12]


def load_config(path: str | Path | None = None, text: str | None = None) -> RunConfig:
    """Read an INI config; unspecified keys keep their defaults."""
    parser = configparser.ConfigParser()
    if text is not None:
        parser.read_string(text)
    elif path is not None:
        path = Path(path)
        if not path.exists():
            raise ValueError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    else:
        raise ValueError("need a path or literal text")

    defaults = RunConfig()
    kwargs: dict = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ValueError(f"unknown config key {key!r} in [{section}]")
            current = getattr(defaults, key)
            if isinstance(current, bool):
                kwargs[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(current, int):
                kwargs[key] = int(raw)
            elif isinstance(current, float):
                kwargs[key] = float(raw)
            elif isinstance(current, tuple):
                if key in ("models",):
                    kwargs[key] = _names(raw)
                elif key in ("k_grid",):
                    kwargs[key] = _ints(raw)
                else:
                    kwargs[key] = _floats(raw)
            else:
                kwargs[key] = raw.strip()
    return RunConfig(**kwargs)
