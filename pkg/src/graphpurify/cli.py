"""Command-line entry point: ``graphpurify <command> [--config ...] [--set key=value ...]``.

Exit codes: 0 success, 1 runtime failure (including missing upstream
artifacts), 2 invalid configuration.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, bundled_config, load_config
from .gnn import load_params
from .graphcore import GraphFormatError, read_edge_list, read_features
from .pipeline import MissingArtifact, Pipeline
from .purifier import evaluate_purification
from .report import (SWEEP_PARAMS, dump_json, run_seeds, sweep, sweep_csv,
                     write_run_outputs)

log = logging.getLogger("graphpurify")

STAGE_COMMANDS = {
    "generate": "dataset",
    "train-classifier": "classifier",
    "train-diffusion": "denoiser",
    "attack": "attack",
    "purify": "purify",
}


def parse_seeds(text: str) -> list[int]:
    """``"0,1,2"`` or ``"0-9"`` (inclusive) or a mix such as ``"0-2,7"``."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ValueError("empty seed list")
    return seeds


def parse_values(text: str) -> list:
    import yaml
    out = [yaml.safe_load(v) for v in text.split(",") if v.strip()]
    if not out:
        raise ValueError("sweep needs at least one value")
    return out


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML/JSON config path, or the name of a bundled config")
    p.add_argument("--out", help="output directory (overrides the config's 'out')")
    p.add_argument("--seeds", help="seed list such as 0,1,2 or 0-9")
    p.add_argument("--workers", type=int, help="parallel seed workers")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config leaf by dotted path (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphpurify",
                                     description="Purify adversarially perturbed graphs.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGE_COMMANDS:
        _common(sub.add_parser(name, help=f"run the {STAGE_COMMANDS[name]} stage"))
    ev = sub.add_parser("evaluate", help="score purification (pipeline artifacts or explicit files)")
    _common(ev)
    ev.add_argument("--clean", help="clean graph edge list (explicit-file mode)")
    ev.add_argument("--attacked", help="attacked graph edge list")
    ev.add_argument("--purified", help="purified graph edge list")
    ev.add_argument("--flips", help="flipped pairs edge list (default: clean XOR attacked)")
    ev.add_argument("--features", help="node feature CSV shared by the three graphs")
    ev.add_argument("--classifier", help="classifier checkpoint JSON")
    _common(sub.add_parser("run-all", help="all stages over every seed plus aggregated report"))
    sw = sub.add_parser("sweep", help="repeat run-all over values of one parameter")
    _common(sw)
    sw.add_argument("--param", required=True, help=f"one of {sorted(SWEEP_PARAMS)}")
    sw.add_argument("--values", required=True, help="comma-separated values")
    return parser


def _resolve_config_path(text):
    if text is None:
        return None
    path = Path(text)
    if path.is_file() or path.suffix or "/" in text:
        return path
    return bundled_config(text)


def _load(args):
    overrides = list(args.overrides)
    if args.seeds:
        try:
            overrides.append(("seeds", parse_seeds(args.seeds)))
        except ValueError as exc:
            raise ConfigError("--seeds", str(exc)) from None
    if args.workers is not None:
        overrides.append(("workers", args.workers))
    if args.out:
        overrides.append(("out", args.out))
    return load_config(_resolve_config_path(args.config), overrides)


def _cmd_stage(cfg, stage: str) -> int:
    pipe = Pipeline(cfg, cfg.out, auto=False)
    for seed in cfg.seeds:
        getattr(pipe, stage)(seed)
        print(pipe.artifact_path(stage, seed))
    return 0


def _cmd_evaluate_files(args) -> int:
    missing = [n for n in ("clean", "attacked", "purified", "classifier") if not getattr(args, n)]
    if missing:
        raise ConfigError("--" + missing[0], "explicit-file evaluation needs --clean, --attacked, "
                          "--purified and --classifier")
    feats = read_features(args.features) if args.features else None
    clean = read_edge_list(args.clean, feats)
    attacked = read_edge_list(args.attacked, feats)
    purified = read_edge_list(args.purified, feats)
    if clean.node_labels is None:
        raise GraphFormatError(f"{args.clean}: clean graph needs a labels section")
    attacked = clean.with_adjacency(attacked.adjacency)
    purified = clean.with_adjacency(purified.adjacency)
    flips = (read_edge_list(args.flips).adjacency if args.flips
             else clean.adjacency ^ attacked.adjacency)
    clf = load_params(args.classifier)
    metrics = evaluate_purification(clean, attacked, purified, np.asarray(flips), clf).to_dict()
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(dump_json({"metrics": metrics}), encoding="utf-8")
    print(dump_json(metrics), end="")
    return 0


def _cmd_evaluate(cfg) -> int:
    pipe = Pipeline(cfg, cfg.out, auto=False)
    records = []
    for seed in cfg.seeds:
        pipe.evaluate(seed)
        records.append(pipe.seed_record(seed))
    paths = write_run_outputs(cfg, records, [{} for _ in records], cfg.out)
    print(paths["metrics"])
    return 0


def _cmd_run_all(cfg) -> int:
    records, timings = run_seeds(cfg, cfg.out)
    paths = write_run_outputs(cfg, records, timings, cfg.out)
    print(paths["report"])
    return 0


def _cmd_sweep(cfg, args) -> int:
    if args.param not in SWEEP_PARAMS:
        raise ConfigError("--param", f"unknown sweep parameter {args.param!r}; "
                          f"choose from {sorted(SWEEP_PARAMS)}")
    try:
        values = parse_values(args.values)
    except ValueError as exc:
        raise ConfigError("--values", str(exc)) from None
    rows = sweep(cfg, args.param, values, cfg.out)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"sweep-{args.param}.csv"
    path.write_text(sweep_csv(rows), encoding="utf-8")
    print(path)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "evaluate" and args.purified:
            return _cmd_evaluate_files(args)
        cfg = _load(args)
        if args.command in STAGE_COMMANDS:
            return _cmd_stage(cfg, STAGE_COMMANDS[args.command])
        if args.command == "evaluate":
            return _cmd_evaluate(cfg)
        if args.command == "run-all":
            return _cmd_run_all(cfg)
        return _cmd_sweep(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, OSError, FloatingPointError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
