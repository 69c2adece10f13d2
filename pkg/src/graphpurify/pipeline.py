"""Seeded experiment stages with content-addressed artifacts.

Each stage result is cached in memory and, when an output directory is
given, written to ``<out>/artifacts/<stage>-s<seed>-<digest>.<ext>`` where
the digest covers exactly the config sections the stage depends on.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackResult, run_attack
from .config import RunConfig
from .diffusion import (DenoiserParams, NoiseSchedule, build_schedule, load_denoiser,
                        save_denoiser, train_diffusion)
from .gnn import GcnParams, load_params, predict_accuracy, save_params, train_classifier
from .graphcore import (DatasetSplit, Graph, edge_density, generate_sbm, read_edge_list,
                        read_features, rng_stream, split_dataset, write_edge_list,
                        write_features)
from .purifier import PurificationTrace, evaluate_purification, purify

log = logging.getLogger(__name__)

STAGE_DEPS = {
    "dataset": ("task", "data"),
    "classifier": ("task", "data", "classifier"),
    "denoiser": ("task", "data", "diffusion"),
    "attack": ("task", "data", "classifier", "attack"),
    "purify": ("task", "data", "classifier", "diffusion", "attack", "purify"),
    "evaluate": ("task", "data", "classifier", "diffusion", "attack", "purify"),
}
EXTENSIONS = {"dataset": "npz", "classifier": "json", "denoiser": "json", "attack": "npz",
              "purify": "npz", "evaluate": "json"}


class MissingArtifact(RuntimeError):
    """An upstream stage has not been run for this config and seed."""


@dataclass
class Dataset:
    graphs: list[Graph]
    split: DatasetSplit
    task: str

    @property
    def graph(self) -> Graph:
        return self.graphs[0]


@dataclass
class ClassifierArtifact:
    params: GcnParams
    loss_history: list[float] = field(default_factory=list)


@dataclass
class DenoiserArtifact:
    params: DenoiserParams
    schedule: NoiseSchedule
    loss_history: list[float] = field(default_factory=list)


@dataclass
class AttackArtifact:
    perturbed: list[Graph]
    flipped: list[np.ndarray]
    summary: dict


@dataclass
class PurifyArtifact:
    purified: list[Graph]
    traces: list[PurificationTrace]


def _derived_seeds(seed: int, tag: str, count: int) -> list[int]:
    return rng_stream(seed, tag).integers(0, 2 ** 31 - 1, size=count).tolist()


class Pipeline:
    """Runs and caches the stages of one experiment configuration.

    With ``auto=False`` a stage whose inputs are missing raises
    :class:`MissingArtifact` instead of computing them.
    """

    def __init__(self, config: RunConfig, out_dir=None, auto: bool = True, cache=None):
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.auto = auto
        self._cache = {} if cache is None else cache
        self.timings: dict[tuple[str, int], float] = {}

    def with_config(self, config: RunConfig) -> "Pipeline":
        """A pipeline for a modified config that reuses results of unchanged stages."""
        return Pipeline(config, self.out_dir, self.auto, self._cache)

    # ------------------------------------------------------------ bookkeeping

    def digest(self, stage: str) -> str:
        return self.config.digest(*STAGE_DEPS[stage])

    def artifact_path(self, stage: str, seed: int) -> Path | None:
        if self.out_dir is None:
            return None
        return self.out_dir / "artifacts" / f"{stage}-s{seed}-{self.digest(stage)}.{EXTENSIONS[stage]}"

    def _get(self, stage: str, seed: int, build, save, load):
        key = (stage, self.digest(stage), seed)
        if key in self._cache:
            return self._cache[key]
        path = self.artifact_path(stage, seed)
        if path is not None and path.exists():
            value = load(path)
        else:
            start = time.perf_counter()
            value = build()
            self.timings[(stage, seed)] = time.perf_counter() - start
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                save(value, path)
        self._cache[key] = value
        return value

    def _upstream(self, stage: str, seed: int):
        if not self.auto:
            key = (stage, self.digest(stage), seed)
            path = self.artifact_path(stage, seed)
            if key not in self._cache and (path is None or not path.exists()):
                name = path.name if path is not None else f"{stage} (seed {seed})"
                raise MissingArtifact(f"missing upstream artifact {name}; run the {stage} stage first")
        return getattr(self, stage)(seed)

    # ------------------------------------------------------------ stages

    def dataset(self, seed: int) -> Dataset:
        return self._get("dataset", seed, lambda: self._make_dataset(seed), _save_dataset,
                         _load_dataset)

    def _make_dataset(self, seed: int) -> Dataset:
        cfg = self.config
        d = cfg.data
        if cfg.task == "node":
            if d.source == "files":
                feats = read_features(d.features_file) if d.features_file else None
                graph = read_edge_list(d.edge_list, feats)
                if graph.node_labels is None:
                    raise ValueError(f"{d.edge_list}: node task needs a labels section")
            else:
                graph = generate_sbm(cfg.sbm(seed))
            graphs = [graph]
            n_items = graph.num_nodes
        else:
            seeds = _derived_seeds(seed, "graph-dataset", d.num_graphs)
            graphs = []
            for i, s in enumerate(seeds):
                label = i % 2
                g = generate_sbm(cfg.sbm(s, num_blocks=d.num_blocks + label))
                graphs.append(Graph(g.adjacency, g.features, None, label))
            n_items = len(graphs)
        return Dataset(graphs, split_dataset(n_items, tuple(d.split), seed), cfg.task)

    def classifier(self, seed: int) -> ClassifierArtifact:
        def build():
            data = self._upstream("dataset", seed)
            source = data.graph if data.task == "node" else data.graphs
            res = train_classifier(source, data.split, self.config.train_config(seed), data.task)
            return ClassifierArtifact(res.params, res.loss_history)
        return self._get("classifier", seed, build, _save_classifier, _load_classifier)

    def denoiser(self, seed: int) -> DenoiserArtifact:
        def build():
            cfg = self.config
            if cfg.task == "node" and cfg.data.source == "sbm":
                # independent draws from the same generator, never the evaluated graph
                seeds = _derived_seeds(seed, "denoiser-corpus", cfg.diffusion.num_train_graphs)
                corpus = [generate_sbm(cfg.sbm(s)) for s in seeds]
            else:
                data = self._upstream("dataset", seed)
                corpus = (data.graphs if data.task == "node"
                          else [data.graphs[i] for i in data.split.train])
            sched = build_schedule(cfg.diffusion.T, cfg.diffusion.s, edge_density(corpus))
            res = train_diffusion(corpus, sched, cfg.diffusion_config(seed))
            return DenoiserArtifact(res.params, sched, res.loss_history)
        return self._get("denoiser", seed, build, _save_denoiser, _load_denoiser)

    def attack(self, seed: int) -> AttackArtifact:
        def build():
            cfg = self.config
            data = self._upstream("dataset", seed)
            clf = self._upstream("classifier", seed).params
            a = cfg.attack
            if data.task == "node":
                target = data.split.test if a.target == "test" else None
                res = [run_attack(a.name, data.graph, clf, a.budget, seed, target)]
            else:
                res = [run_attack(a.name, data.graphs[i], clf, a.budget, int(s))
                       for i, s in zip(data.split.test,
                                       _derived_seeds(seed, "graph-attack", len(data.split.test)))]
            return AttackArtifact([r.perturbed for r in res], [r.flipped_mask for r in res],
                                  _attack_summary(res))
        return self._get("attack", seed, build, _save_attack, _load_attack)

    def purify(self, seed: int) -> PurifyArtifact:
        def build():
            clf = self._upstream("classifier", seed).params
            den = self._upstream("denoiser", seed)
            att = self._upstream("attack", seed)
            pcfg = self.config.purify_config(seed)
            out, traces = [], []
            for i, g in enumerate(att.perturbed):
                cfg_i = pcfg if len(att.perturbed) == 1 else dataclasses.replace(
                    pcfg, seed=_derived_seeds(seed, "graph-purify", len(att.perturbed))[i])
                pur, trace = purify(g, clf, den.params, den.schedule, cfg_i)
                out.append(pur)
                traces.append(trace)
            return PurifyArtifact(out, traces)
        return self._get("purify", seed, build, _save_purify, _load_purify)

    def evaluate(self, seed: int) -> dict:
        def build():
            data = self._upstream("dataset", seed)
            clf = self._upstream("classifier", seed).params
            att = self._upstream("attack", seed)
            pur = self._upstream("purify", seed)
            if data.task == "node":
                m = evaluate_purification(data.graph, att.perturbed[0], pur.purified[0],
                                          att.flipped[0], clf, data.split.test)
            else:
                clean = [data.graphs[i] for i in data.split.test]
                m = evaluate_purification(clean, att.perturbed, pur.purified, att.flipped, clf)
            return m.to_dict()
        return self._get("evaluate", seed, build, _save_json, _load_json)

    # ------------------------------------------------------------ records

    def seed_record(self, seed: int) -> dict:
        """Everything the report needs for one seed (runs missing stages when ``auto``)."""
        metrics = self.evaluate(seed)
        data = self._upstream("dataset", seed)
        clf = self._upstream("classifier", seed)
        den = self._upstream("denoiser", seed)
        att = self._upstream("attack", seed)
        pur = self._upstream("purify", seed)
        train_idx = data.split.train
        if data.task == "node":
            train_acc = predict_accuracy(clf.params, data.graph, idx=train_idx)
        else:
            train_acc = predict_accuracy(clf.params, [data.graphs[i] for i in train_idx])
        steps = [s for tr in pur.traces[:1] for s in tr.steps]
        return {
            "seed": seed,
            "metrics": metrics,
            "classifier": {"train_accuracy": train_acc,
                           "final_loss": clf.loss_history[-1] if clf.loss_history else None},
            "diffusion": {"edge_density": den.schedule.edge_density,
                          "loss_curve": _downsample(den.loss_history, 50)},
            "attack": att.summary,
            "lid": [tr.lid for tr in pur.traces[:1]][0] if pur.traces else {},
            "timetable_histogram": pur.traces[0].timetable_histogram if pur.traces else [],
            "guidance_log": steps,
            "guidance_norm_mean": float(np.mean([s["guidance_norm"] for s in steps]))
            if steps else 0.0,
        }


def _downsample(values, count):
    values = list(values)
    if len(values) <= count:
        return [float(v) for v in values]
    idx = np.linspace(0, len(values) - 1, count).round().astype(int)
    return [float(values[i]) for i in idx]


def _attack_summary(results: list[AttackResult]) -> dict:
    return {
        "name": results[0].attack_name,
        "graphs": len(results),
        "flips": int(sum(r.num_flips for r in results)),
        "insertions": int(sum(int(np.triu(r.flipped_mask & r.perturbed.adjacency, 1).sum())
                              for r in results)),
    }


# ---------------------------------------------------------------- serialization

def _graphs_to_arrays(graphs):
    out = {"adjacency": np.stack([g.adjacency for g in graphs]),
           "features": np.stack([g.features for g in graphs])}
    if graphs[0].node_labels is not None:
        out["node_labels"] = np.stack([g.node_labels for g in graphs])
    if graphs[0].graph_label is not None:
        out["graph_labels"] = np.array([g.graph_label for g in graphs])
    return out


def _arrays_to_graphs(z):
    n = z["adjacency"].shape[0]
    labels = z["node_labels"] if "node_labels" in z else [None] * n
    glabels = z["graph_labels"] if "graph_labels" in z else [None] * n
    return [Graph(z["adjacency"][i], z["features"][i], labels[i],
                  None if glabels[i] is None else int(glabels[i])) for i in range(n)]


def _save_dataset(data: Dataset, path):
    np.savez_compressed(path, **_graphs_to_arrays(data.graphs), train=data.split.train,
                        val=data.split.val, test=data.split.test, ratios=np.array(data.split.ratios),
                        task=np.array(data.task))
    if data.task == "node":
        write_edge_list(data.graph, Path(path).with_suffix(".edges"))
        write_features(data.graph.features, Path(path).with_suffix(".features.csv"))


def _load_dataset(path) -> Dataset:
    with np.load(path) as z:
        z = dict(z)
    split = DatasetSplit(z["train"], z["val"], z["test"], tuple(z["ratios"].tolist()))
    return Dataset(_arrays_to_graphs(z), split, str(z["task"]))


def _save_classifier(art: ClassifierArtifact, path):
    save_params(art.params, path)
    _save_json({"loss_history": art.loss_history}, Path(path).with_suffix(".history.json"))


def _load_classifier(path) -> ClassifierArtifact:
    hist = Path(path).with_suffix(".history.json")
    return ClassifierArtifact(load_params(path),
                              _load_json(hist)["loss_history"] if hist.exists() else [])


def _save_denoiser(art: DenoiserArtifact, path):
    save_denoiser(art.params, art.schedule, path)
    _save_json({"loss_history": art.loss_history}, Path(path).with_suffix(".history.json"))


def _load_denoiser(path) -> DenoiserArtifact:
    params, sched = load_denoiser(path)
    hist = Path(path).with_suffix(".history.json")
    return DenoiserArtifact(params, sched, _load_json(hist)["loss_history"] if hist.exists() else [])


def _save_attack(art: AttackArtifact, path):
    np.savez_compressed(path, **_graphs_to_arrays(art.perturbed), flipped=np.stack(art.flipped))
    _save_json(art.summary, Path(path).with_suffix(".summary.json"))
    if len(art.perturbed) == 1:
        write_edge_list(art.perturbed[0], Path(path).with_suffix(".edges"))
        write_edge_list(Graph(art.flipped[0], art.perturbed[0].features),
                        Path(path).with_suffix(".flips"))


def _load_attack(path) -> AttackArtifact:
    with np.load(path) as z:
        z = dict(z)
    graphs = _arrays_to_graphs(z)
    flipped = [np.asarray(f, dtype=np.uint8) for f in z["flipped"]]
    for g, f in zip(graphs, flipped):
        if not np.array_equal(f, f.T) or f.shape != g.adjacency.shape:
            raise ValueError(f"{path}: flip mask is malformed")
    return AttackArtifact(graphs, flipped, _load_json(Path(path).with_suffix(".summary.json")))


def _save_purify(art: PurifyArtifact, path):
    np.savez_compressed(path, **_graphs_to_arrays(art.purified))
    path = Path(path)
    for i, tr in enumerate(art.traces):
        tr.to_jsonl(path.with_suffix(f".trace{i}.jsonl"))
        if tr.snapshots:
            tr.write_snapshots(path.with_suffix(f".snapshots{i}"))
    meta = [{"lid": tr.lid, "timetable_histogram": tr.timetable_histogram,
             "clamped_times": tr.clamped_times, "restarts": tr.restarts} for tr in art.traces]
    _save_json(meta, path.with_suffix(".meta.json"))
    if len(art.purified) == 1:
        write_edge_list(art.purified[0], path.with_suffix(".edges"))


def _load_purify(path) -> PurifyArtifact:
    with np.load(path) as z:
        graphs = _arrays_to_graphs(dict(z))
    path = Path(path)
    meta = _load_json(path.with_suffix(".meta.json"))
    traces = []
    for i, (g, m) in enumerate(zip(graphs, meta)):
        steps = [json.loads(line) for line in
                 path.with_suffix(f".trace{i}.jsonl").read_text(encoding="utf-8").splitlines()]
        traces.append(PurificationTrace(steps, g.adjacency, m["lid"], m["timetable_histogram"],
                                        m["clamped_times"], m["restarts"]))
    return PurifyArtifact(graphs, traces)


def _save_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
