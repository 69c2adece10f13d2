"""Multi-seed runs, aggregation and the on-disk report / metric files."""
from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import SCHEMA_VERSION, RunConfig, apply_overrides, config_from_dict
from .pipeline import Pipeline

METRIC_KEYS = ("acc_clean", "acc_attacked", "acc_purified", "removal_rate",
               "preservation_rate", "recovery_ratio")
SWEEP_PARAMS = {"t_p": "purify.t_p", "lambda": "purify.scale", "budget": "attack.budget",
                "k": "purify.k"}


def _seed_job(args, cache=None):
    config, out_dir, seed = args
    pipe = Pipeline(config, out_dir, cache=cache)
    start = time.perf_counter()
    record = pipe.seed_record(seed)
    timings = {stage: t for (stage, _), t in pipe.timings.items()}
    timings["total"] = time.perf_counter() - start
    return record, timings


def run_seeds(config: RunConfig, out_dir=None, seeds=None, workers=None, cache=None):
    """Run every stage for each seed; returns ``(records, timings)`` in seed order.

    ``cache`` (a dict) shares stage results between serial calls, e.g. across
    the points of a sweep.
    """
    seeds = list(config.seeds if seeds is None else seeds)
    workers = config.workers if workers is None else workers
    jobs = [(config, out_dir, s) for s in seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_seed_job, jobs))
    else:
        results = [_seed_job(j, cache) for j in jobs]
    return [r for r, _ in results], [t for _, t in results]


def aggregate(rows: list[dict], keys=METRIC_KEYS) -> dict:
    """Mean and sample standard deviation (0 for a single row) of each metric."""
    out = {}
    for k in keys:
        vals = np.array([r[k] for r in rows], dtype=np.float64)
        out[k] = {"mean": float(vals.mean()),
                  "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0}
    return out


def metrics_document(config: RunConfig, records: list[dict]) -> dict:
    """Deterministic metrics summary: no timings, no paths."""
    return {
        "schema_version": SCHEMA_VERSION,
        "config_digest": config.digest(),
        "seeds": [r["seed"] for r in records],
        "per_seed": {str(r["seed"]): r["metrics"] for r in records},
        "aggregate": aggregate([r["metrics"] for r in records]),
    }


def metrics_csv(records: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("seed",) + METRIC_KEYS)
    for r in records:
        writer.writerow([r["seed"]] + [repr(float(r["metrics"][k])) for k in METRIC_KEYS])
    agg = aggregate([r["metrics"] for r in records])
    for stat in ("mean", "std"):
        writer.writerow([stat] + [repr(agg[k][stat]) for k in METRIC_KEYS])
    return buf.getvalue()


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_run_outputs(config: RunConfig, records, timings, out_dir) -> dict:
    """Write report.json, metrics.json and metrics.csv; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = metrics_document(config, records)
    report = {
        "schema_version": SCHEMA_VERSION,
        "config": config.to_dict(),
        "seeds": metrics["seeds"],
        "per_seed": records,
        "aggregate": metrics["aggregate"],
        "timings": {str(r["seed"]): t for r, t in zip(records, timings)},
    }
    paths = {"report": out / "report.json", "metrics": out / "metrics.json",
             "metrics_csv": out / "metrics.csv"}
    paths["report"].write_text(dump_json(report), encoding="utf-8")
    paths["metrics"].write_text(dump_json(metrics), encoding="utf-8")
    paths["metrics_csv"].write_text(metrics_csv(records), encoding="utf-8")
    return paths


def sweep(config: RunConfig, parameter: str, values, out_dir=None, seeds=None,
          workers=None) -> list[dict]:
    """One row per (value, seed) plus ``mean`` and ``std`` rows per value."""
    if parameter not in SWEEP_PARAMS:
        raise ValueError(f"unknown sweep parameter {parameter!r}; choose from {sorted(SWEEP_PARAMS)}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    path = SWEEP_PARAMS[parameter]
    base = config.to_dict()
    cache = {}
    rows = []
    for value in values:
        cfg = config_from_dict(apply_overrides(base, [(path, value)]))
        records, _ = run_seeds(cfg, out_dir, seeds, workers, cache)
        per = []
        for r in records:
            row = {"parameter": parameter, "value": value, "seed": r["seed"], **r["metrics"],
                   "guidance_norm_mean": r["guidance_norm_mean"]}
            per.append(row)
        rows.extend(per)
        keys = METRIC_KEYS + ("guidance_norm_mean",)
        agg = aggregate(per, keys)
        for stat in ("mean", "std"):
            rows.append({"parameter": parameter, "value": value, "seed": stat,
                         **{k: agg[k][stat] for k in keys}})
    return rows


SWEEP_COLUMNS = ("parameter", "value", "seed") + METRIC_KEYS + ("guidance_norm_mean",)


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for r in rows:
        writer.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in SWEEP_COLUMNS])
    return buf.getvalue()
