"""Command-line entry point.

Verbs map to the pipeline stages: ``simulate`` writes mixture datasets,
``train`` writes model archives, ``detect`` scores datasets against the
archives, ``evaluate`` turns stored decisions into report CSVs, and
``report`` runs everything end to end.  Exit code 0 on success, 1 on a
validation problem (bad config, missing inputs), 2 on an unexpected
runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .archive import load_bank_archive
from .config import RunConfig, config_hash, load_config
from .mixing import MIXING_MODELS
from .pipeline import (
    load_detect_outputs,
    load_ns_records,
    load_pixel_batch,
    run_detect,
    run_evaluate,
    run_report,
    run_simulate,
    run_train,
)
from .spectral import load_library

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="endmix",
        description="Endmember detection via hidden Markov chains on wavelet "
        "coefficients, with sparse-unmixing baselines.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for verb, help_text in (
        ("simulate", "generate the library split and synthetic mixture datasets"),
        ("train", "train chain models and detector banks, write archives"),
        ("detect", "score stored datasets against stored archives"),
        ("evaluate", "sweep parameter grids and write report CSVs"),
        ("report", "run simulate, train, detect and evaluate in one go"),
    ):
        p = sub.add_parser(verb, help=help_text)
        p.add_argument("--config", type=Path, default=None, help="INI config file")
        p.add_argument(
            "--seed", type=int, default=None,
            help="override the library and mixing seeds together",
        )
        p.add_argument("--out", type=Path, default=None, help="output directory")
        p.add_argument(
            "--k", type=str, default=None,
            help="comma-separated chain state counts, e.g. 2,4",
        )
        p.add_argument(
            "--model", choices=MIXING_MODELS, default=None,
            help="restrict the run to one mixing model",
        )
    return parser


def _load_and_override(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    updates: dict = {}
    if args.seed is not None:
        updates["library_seed"] = args.seed
        updates["mixing_seed"] = args.seed
    if args.out is not None:
        updates["out_dir"] = str(args.out)
    if args.k is not None:
        updates["k_grid"] = tuple(int(x) for x in args.k.replace(",", " ").split())
    if args.model is not None:
        updates["models"] = (args.model,)
    return dataclasses.replace(cfg, **updates) if updates else cfg


def _cmd_detect(cfg: RunConfig) -> None:
    out = Path(cfg.out_dir)
    banks_by_k = {}
    for k in cfg.k_grid:
        path = out / f"model_k{k}.json"
        if not path.exists():
            raise ValueError(f"missing model archive {path}; run train first")
        banks_by_k[k] = load_bank_archive(path)
    datasets = {}
    for model in cfg.models:
        path = out / f"mixtures_{model}.csv"
        if not path.exists():
            raise ValueError(f"missing dataset {path}; run simulate first")
        stored_model, batch = load_pixel_batch(path)
        if stored_model != model:
            raise ValueError(f"{path} holds model {stored_model!r}, expected {model!r}")
        datasets[model] = batch
    train_path = out / "library_train.csv"
    if not train_path.exists():
        raise ValueError(f"missing training library {train_path}; run simulate first")
    train_lib = load_library(train_path)
    run_detect(cfg, banks_by_k, datasets, train_lib)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_and_override(args)
    except (ValueError, TypeError) as exc:
        print(f"endmix: configuration error: {exc}", file=sys.stderr)
        return 1
    try:
        if args.command == "simulate":
            run_simulate(cfg)
        elif args.command == "train":
            run_train(cfg)
        elif args.command == "detect":
            _cmd_detect(cfg)
        elif args.command == "evaluate":
            detect_result = load_detect_outputs(cfg)
            ns_records = load_ns_records(cfg)
            run_evaluate(cfg, detect_result, ns_records)
        else:
            run_report(cfg)
    except ValueError as exc:
        print(f"endmix {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"endmix {args.command}: unexpected failure: {exc}", file=sys.stderr)
        return 2
    print(f"endmix {args.command}: outputs in {cfg.out_dir} (config {config_hash(cfg)})")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
