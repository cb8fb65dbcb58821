"""Experiment configuration: a JSON document with five optional sections.

Every key has a default, unknown keys are rejected, and numeric bounds are
checked on load so that a bad file fails before any work starts.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ValidationError


def _require(cond, msg):
    if not cond:
        raise ValidationError(msg)


@dataclass(frozen=True)
class TaskSection:
    k: int = 100
    n: int = 10
    m_nontargets: int = 200
    probes: dict = field(default_factory=lambda: {"1": 20, "2": 20, "3": 20})
    d_embed: int = 1000

    def validate(self):
        _require(1 <= self.n <= self.k, "task.n must satisfy 1 <= n <= k")
        _require(self.m_nontargets >= 1, "task.m_nontargets must be >= 1")
        _require(self.d_embed >= 1, "task.d_embed must be >= 1")
        for j, count in self.probes.items():
            _require(str(j).isdigit() and 0 <= int(j) <= self.n,
                     f"task.probes key {j!r} must be an overlap level in [0, n]")
            _require(isinstance(count, int) and count >= 0,
                     f"task.probes[{j!r}] must be a nonnegative integer")

    @property
    def probes_per_level(self) -> dict[int, int]:
        return {int(j): c for j, c in self.probes.items()}


@dataclass(frozen=True)
class ModelSection:
    kind: str = "mlp"
    widths: list = field(default_factory=lambda: [32])
    init_scale: float = 0.3
    noise_std: float = 0.1

    def validate(self):
        _require(self.kind in ("mlp", "bio", "linear2"), "model.kind must be mlp, bio or linear2")
        _require(all(isinstance(w, int) and w >= 1 for w in self.widths),
                 "model.widths must be positive integers")
        need = {"mlp": 1, "bio": 2, "linear2": 1}[self.kind]
        _require(len(self.widths) == need, f"model.widths needs {need} entries for {self.kind}")
        if self.kind == "bio":
            _require(self.widths[1] < self.widths[0], "bio widths must narrow: h3 < h1")
        _require(self.init_scale > 0, "model.init_scale must be positive")
        _require(self.noise_std >= 0, "model.noise_std must be nonnegative")


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 10_000
    lr: float = 0.5
    loss: str = "cross_entropy"
    C: float = 1.0
    seed: int = 0
    snapshot_epochs: list = field(default_factory=list)
    target_upweight: float = 1e3
    eval_every: int = 10

    def validate(self):
        _require(self.epochs >= 1, "train.epochs must be >= 1")
        _require(self.lr > 0, "train.lr must be positive")
        _require(self.loss in ("cross_entropy", "hinge"), "train.loss must be cross_entropy or hinge")
        _require(self.C > 0, "train.C must be positive")
        _require(isinstance(self.seed, int) and self.seed >= 0, "train.seed must be a nonnegative integer")
        _require(all(isinstance(e, int) and 0 <= e <= self.epochs for e in self.snapshot_epochs),
                 "train.snapshot_epochs must be integers in [0, epochs]")
        _require(self.target_upweight > 0, "train.target_upweight must be positive")
        _require(self.eval_every >= 1, "train.eval_every must be >= 1")


@dataclass(frozen=True)
class AnalysisSection:
    folds: int = 10
    iterations: int = 20
    baseline_draws: int = 500
    percentiles: list = field(default_factory=lambda: [1, 5])
    window_ms: list = field(default_factory=lambda: [2000.0, 2500.0])
    min_total_spikes: int = 4
    exclude: list = field(default_factory=list)

    def validate(self):
        _require(self.folds >= 2, "analysis.folds must be >= 2")
        _require(self.iterations >= 1, "analysis.iterations must be >= 1")
        _require(self.baseline_draws >= 2, "analysis.baseline_draws must be >= 2")
        _require(all(0 < p <= 100 for p in self.percentiles), "analysis.percentiles must lie in (0, 100]")
        _require(len(self.window_ms) == 2 and 0 <= self.window_ms[0] < self.window_ms[1] <= 2500,
                 "analysis.window_ms must be [start, end] inside [0, 2500]")
        _require(self.min_total_spikes >= 0, "analysis.min_total_spikes must be >= 0")
        _require(all(isinstance(s, str) for s in self.exclude), "analysis.exclude must list session ids")


@dataclass(frozen=True)
class ReversalSection:
    gamma0: float = 2.0
    dt: float = 1e-3
    T_list: list = field(default_factory=lambda: [0.1, 0.5, 1.0, 2.0, 4.0])
    eps: float = 0.1
    horizon: float = 10.0
    N: int = 250
    lr: float = 1e-3
    update_W1: bool = True
    n_pc_checkpoints: int = 4

    def validate(self):
        _require(self.gamma0 > 0, "reversal.gamma0 must be positive")
        _require(0 < self.dt <= 0.1, "reversal.dt must lie in (0, 0.1]")
        _require(len(self.T_list) >= 1 and all(T > 0 for T in self.T_list),
                 "reversal.T_list must be non-empty and positive")
        _require(list(self.T_list) == sorted(self.T_list), "reversal.T_list must be sorted")
        _require(0 < self.eps < 1, "reversal.eps must lie in (0, 1)")
        _require(self.horizon > 0, "reversal.horizon must be positive")
        _require(self.N >= 1, "reversal.N must be >= 1")
        _require(0 < self.lr <= 0.1, "reversal.lr must lie in (0, 0.1]")
        _require(self.n_pc_checkpoints >= 1, "reversal.n_pc_checkpoints must be >= 1")


_SECTIONS = {"task": TaskSection, "model": ModelSection, "train": TrainSection,
             "analysis": AnalysisSection, "reversal": ReversalSection}

_NUMERIC = (int, float)


def _check_type(section, name, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, _NUMERIC) and not isinstance(value, bool)
    else:
        ok = isinstance(value, type(default))
    _require(ok, f"{section}.{name} has the wrong type ({type(value).__name__})")


def _build(section, cls, doc):
    _require(isinstance(doc, dict), f"section {section!r} must be an object")
    defaults = cls()
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    _require(not unknown, f"unknown keys in {section}: {unknown}")
    for name, value in doc.items():
        _check_type(section, name, value, getattr(defaults, name))
    values = {k: float(v) if isinstance(getattr(defaults, k), float) else v for k, v in doc.items()}
    obj = replace(defaults, **values)
    obj.validate()
    return obj


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskSection = field(default_factory=TaskSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    reversal: ReversalSection = field(default_factory=ReversalSection)

    @classmethod
    def from_dict(cls, doc: dict) -> ExperimentConfig:
        _require(isinstance(doc, dict), "config must be a JSON object")
        unknown = sorted(set(doc) - set(_SECTIONS))
        _require(not unknown, f"unknown config sections: {unknown}")
        built = {name: _build(name, sec, doc.get(name, {})) for name, sec in _SECTIONS.items()}
        cfg = cls(**built)
        cfg.task.validate()
        return cfg

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {path} is not valid JSON: {exc.msg} "
                                  f"(line {exc.lineno})") from None
        return cls.from_dict(doc)

    def with_seed(self, seed: int | None) -> ExperimentConfig:
        if seed is None:
            return self
        return replace(self, train=_build("train", TrainSection, {**asdict(self.train), "seed": seed}))

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def sha256(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()
