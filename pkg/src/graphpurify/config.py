"""Run configuration: a nested key-value file validated into dataclasses."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .diffusion import DiffusionTrainConfig
from .entropy import EntropyConfig, GuidanceConfig
from .gnn import TrainConfig
from .graphcore import SbmConfig
from .lid import LidConfig
from .purifier import PurifyConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted field path at fault."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass
class DataSection:
    source: str = "sbm"
    num_nodes: int = 100
    num_blocks: int = 2
    intra_prob: float = 0.2
    inter_prob: float = 0.002
    feature_dim: int = 16
    feature_signal: float = 1.0
    num_graphs: int = 40
    edge_list: str | None = None
    features_file: str | None = None
    split: list[float] = field(default_factory=lambda: [0.1, 0.1, 0.8])


@dataclass
class ClassifierSection:
    learning_rate: float = 3e-4
    epochs: int = 200
    optimizer: str = "adam"
    weight_decay: float = 5e-4
    hidden: int = 16
    hidden2: int = 16


@dataclass
class DiffusionSection:
    T: int = 50
    s: float = 0.008
    steps: int = 3000
    learning_rate: float = 3e-3
    weight_decay: float = 0.0
    width: int = 32
    scorer_hidden: int = 32
    time_dim: int = 16
    num_train_graphs: int = 8


@dataclass
class AttackSection:
    name: str = "grad_greedy"
    budget: float = 0.2
    target: str = "test"


@dataclass
class PurifySection:
    t_p: int = 6
    guidance: bool = True
    scale: float = 1.0
    sign: str = "ascend"
    gradient_mode: str = "analytic_alpha2"
    alpha: float = 2.0
    sigma: float = 2.0
    bandwidth_mode: str = "fixed"
    form: str = "ratio"
    k: int | None = None
    num_restarts: int = 1
    isotropic: bool = False
    reference: str = "fresh"
    snapshot_max_nodes: int = 0


@dataclass
class RunConfig:
    task: str = "node"
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    workers: int = 1
    out: str = "runs"
    data: DataSection = field(default_factory=DataSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    attack: AttackSection = field(default_factory=AttackSection)
    purify: PurifySection = field(default_factory=PurifySection)
    schema_version: int = SCHEMA_VERSION

    # ------------------------------------------------------------ module configs

    def sbm(self, seed: int, num_blocks: int | None = None) -> SbmConfig:
        d = self.data
        return SbmConfig(d.num_nodes, num_blocks or d.num_blocks, d.intra_prob, d.inter_prob,
                         seed, d.feature_dim, d.feature_signal)

    def train_config(self, seed: int) -> TrainConfig:
        c = self.classifier
        return TrainConfig(learning_rate=c.learning_rate, epochs=c.epochs, optimizer=c.optimizer,
                           weight_decay=c.weight_decay, seed=seed, hidden=c.hidden,
                           hidden2=c.hidden2)

    def diffusion_config(self, seed: int) -> DiffusionTrainConfig:
        d = self.diffusion
        return DiffusionTrainConfig(steps=d.steps, learning_rate=d.learning_rate,
                                    weight_decay=d.weight_decay, width=d.width,
                                    scorer_hidden=d.scorer_hidden, time_dim=d.time_dim,
                                    seed=seed)

    def purify_config(self, seed: int) -> PurifyConfig:
        p = self.purify
        return PurifyConfig(
            t_p=p.t_p, guidance=p.guidance,
            guide=GuidanceConfig(scale=p.scale, sign=p.sign, gradient_mode=p.gradient_mode),
            lid=LidConfig(k=p.k),
            entropy=EntropyConfig(alpha=p.alpha, sigma=p.sigma, bandwidth_mode=p.bandwidth_mode,
                                  form=p.form),
            num_restarts=p.num_restarts, seed=seed, isotropic=p.isotropic,
            reference=p.reference, snapshot_max_nodes=p.snapshot_max_nodes)

    # ------------------------------------------------------------ validation

    def validate(self) -> "RunConfig":
        """Check every section against its module's invariants; raise ConfigError."""
        _check(self.task in ("node", "graph"), "task", f"must be 'node' or 'graph', got {self.task!r}")
        _check(len(self.seeds) > 0, "seeds", "need at least one seed")
        _check(all(s >= 0 for s in self.seeds), "seeds", "seeds must be non-negative")
        _check(len(set(self.seeds)) == len(self.seeds), "seeds", "seeds must be distinct")
        _check(self.workers >= 1, "workers", "must be at least 1")
        _check(self.schema_version == SCHEMA_VERSION, "schema_version",
               f"unsupported version {self.schema_version}; expected {SCHEMA_VERSION}")
        d = self.data
        _check(d.source in ("sbm", "files"), "data.source", "must be 'sbm' or 'files'")
        if d.source == "files":
            _check(self.task == "node", "data.source", "file input supports the node task only")
            _check(bool(d.edge_list), "data.edge_list", "required when data.source is 'files'")
        else:
            _wrap("data", lambda: self.sbm(0))
        if self.task == "graph":
            _check(d.num_graphs >= 10, "data.num_graphs", "need at least 10 graphs")
        _check(len(d.split) == 3 and all(r >= 0 for r in d.split)
               and abs(sum(d.split) - 1.0) < 1e-9, "data.split",
               "must be three non-negative ratios summing to 1")
        _wrap("classifier", lambda: self.train_config(0))
        dif = self.diffusion
        _check(dif.T >= 2, "diffusion.T", "must be at least 2")
        _check(dif.s > 0, "diffusion.s", "must be positive")
        _check(dif.num_train_graphs >= 1, "diffusion.num_train_graphs", "must be positive")
        _wrap("diffusion", lambda: self.diffusion_config(0))
        a = self.attack
        _check(a.name in ("random", "dice", "grad_greedy"), "attack.name",
               f"unknown attack {a.name!r}")
        _check(0.0 < a.budget < 1.0, "attack.budget", "must lie in (0, 1)")
        _check(a.target in ("test", "all"), "attack.target", "must be 'test' or 'all'")
        p = self.purify
        _check(1 <= p.t_p < dif.T, "purify.t_p", f"must satisfy 1 <= t_p < T={dif.T}, got {p.t_p}")
        _check(p.num_restarts >= 1, "purify.num_restarts", "must be at least 1")
        _check(p.reference in ("fresh", "trajectory"), "purify.reference",
               "must be 'fresh' or 'trajectory'")
        if p.k is not None:
            n_min = d.num_nodes if d.source == "sbm" else p.k + 1
            _check(2 <= p.k < n_min, "purify.k", f"must satisfy 2 <= k < N={n_min}")
        if p.guidance and p.gradient_mode == "analytic_alpha2":
            _check(p.alpha == 2, "purify.alpha", "analytic guidance needs alpha = 2")
            _check(p.bandwidth_mode == "fixed", "purify.bandwidth_mode",
                   "analytic guidance needs a fixed bandwidth")
        _wrap("purify", lambda: self.purify_config(0))
        return self

    # ------------------------------------------------------------ serialization

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self, *sections: str, extra=None) -> str:
        """Short content hash of the named sections.

        With no sections given, everything except the output location and the
        worker count (which never change results) is hashed.
        """
        full = self.to_dict()
        if sections:
            part = {k: full[k] for k in sections}
        else:
            part = {k: v for k, v in full.items() if k not in ("out", "workers")}
        blob = json.dumps([part, extra], sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _check(ok: bool, path: str, message: str) -> None:
    if not ok:
        raise ConfigError(path, message)


def _wrap(section: str, build) -> None:
    try:
        build()
    except (ValueError, TypeError) as exc:
        msg = str(exc)
        raise ConfigError(f"{section}.{_guess_field(section, msg)}", msg) from exc


def _guess_field(section: str, message: str) -> str:
    cls = {"data": DataSection, "classifier": ClassifierSection,
           "diffusion": DiffusionSection, "purify": PurifySection}[section]
    names = sorted((f.name for f in dataclasses.fields(cls)), key=len, reverse=True)
    for name in names:
        if name in message:
            return name
    return "*"


# ---------------------------------------------------------------- parsing

def _coerce(value, tp, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected a mapping, got {type(value).__name__}")
        return _build(tp, value, path)
    if origin is list:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            value = [value]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        return [_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return int(value)
    if tp is float:
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError:
                raise ConfigError(path, f"expected a number, got {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def _build(cls, raw: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            where = f"{prefix}.{key}" if prefix else str(key)
            raise ConfigError(where, "unknown field")
    kwargs = {}
    for name in names & set(raw):
        where = f"{prefix}.{name}" if prefix else name
        kwargs[name] = _coerce(raw[name], hints[name], where)
    return cls(**kwargs)


def parse_override(item: str) -> tuple[str, object]:
    """``a.b=value`` with ``value`` parsed as YAML (so ``1e-3``, ``true``, ``[1,2]`` work)."""
    if "=" not in item:
        raise ConfigError(item, "override must look like key.path=value")
    key, text = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(item, "empty key in override")
    return key, yaml.safe_load(text)


def apply_overrides(raw: dict, overrides) -> dict:
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        key, value = parse_override(item) if isinstance(item, str) else item
        parts = key.split(".")
        node = raw
        for i, part in enumerate(parts[:-1]):
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(".".join(parts[:i + 1]), "is not a section")
        node[parts[-1]] = value
    return raw


def config_from_dict(raw: dict | None, overrides=()) -> RunConfig:
    raw = apply_overrides(raw or {}, overrides)
    return _build(RunConfig, raw).validate()


def load_config(path=None, overrides=()) -> RunConfig:
    """Read a YAML (or JSON) run config; missing fields take their defaults."""
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError("--config", f"config file {path} does not exist")
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError("--config", f"cannot parse {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("--config", "top level must be a mapping")
    return config_from_dict(raw, overrides)


def bundled_config(name: str) -> Path:
    path = Path(__file__).parent / "configs" / f"{name}.yaml"
    if not path.exists():
        raise ConfigError("--config", f"no bundled config named {name!r}")
    return path
