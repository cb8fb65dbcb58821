"""Synthetic odor-discrimination task.

Odors are n-hot vectors over k odorants. One odor is the target; nontargets
use only odorants outside the target; a probe at level j shares exactly j
odorants with the target. Odors are passed through a fixed Gaussian random
projection before being fed to a network.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CapacityError, InvalidParameterError

DEFAULT_D_EMBED = 1000
MAX_DRAWS = 1_000_000


@dataclass(frozen=True)
class OdorVector:
    """An n-hot odor, stored as sorted odorant indices."""

    indices: tuple[int, ...]
    k: int

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if len(set(idx)) != len(idx):
            raise InvalidParameterError(f"duplicate odorant indices in {idx}")
        if any(i < 0 or i >= self.k for i in idx):
            raise InvalidParameterError(f"odorant index out of range [0, {self.k})")
        if not 1 <= len(idx) <= self.k:
            raise InvalidParameterError(f"need 1 <= n <= k, got n={len(idx)}, k={self.k}")
        object.__setattr__(self, "indices", tuple(sorted(idx)))

    @property
    def n(self) -> int:
        return len(self.indices)

    @property
    def bits(self) -> np.ndarray:
        v = np.zeros(self.k)
        v[list(self.indices)] = 1.0
        return v

    def overlap(self, other: OdorVector) -> int:
        return len(set(self.indices) & set(other.indices))


@dataclass(frozen=True)
class ProjectionMap:
    matrix: np.ndarray
    seed: int

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_seed(cls, d_embed: int, k: int, seed: int) -> ProjectionMap:
        if d_embed < 1 or k < 1:
            raise InvalidParameterError("projection dimensions must be positive")
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, math.sqrt(1.0 / k), size=(d_embed, k)), int(seed))

    @property
    def d_embed(self) -> int:
        return self.matrix.shape[0]

    @property
    def k(self) -> int:
        return self.matrix.shape[1]


def gen_odor(k: int, n: int, rng: np.random.Generator) -> OdorVector:
    if not 1 <= n <= k:
        raise InvalidParameterError(f"need 1 <= n <= k, got n={n}, k={k}")
    return OdorVector(tuple(rng.choice(k, size=n, replace=False)), k)


def embed(odor: OdorVector, proj: ProjectionMap) -> np.ndarray:
    if proj.k != odor.k:
        raise InvalidParameterError(
            f"projection has {proj.k} columns but odor has length {odor.k}")
    return proj.matrix @ odor.bits


def embed_many(odors, proj: ProjectionMap) -> np.ndarray:
    odors = list(odors)
    if not odors:
        return np.zeros((0, proj.d_embed))
    if any(o.k != proj.k for o in odors):
        raise InvalidParameterError("odor length does not match projection")
    bits = np.stack([o.bits for o in odors])
    return bits @ proj.matrix.T


@dataclass(frozen=True)
class TaskDataset:
    target: OdorVector
    nontargets: tuple[OdorVector, ...]
    probes: Mapping[int, tuple[OdorVector, ...]]
    projection: ProjectionMap
    seed: int | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def k(self) -> int:
        return self.target.k

    @property
    def n(self) -> int:
        return self.target.n

    @property
    def train_odors(self) -> tuple[OdorVector, ...]:
        return (self.target,) + tuple(self.nontargets)

    @property
    def embedded_inputs(self) -> np.ndarray:
        if "train" not in self._cache:
            self._cache["train"] = embed_many(self.train_odors, self.projection)
        return self._cache["train"]

    @property
    def labels(self) -> np.ndarray:
        """Signed labels: +1 for the target, -1 for each nontarget."""
        return np.array([1.0] + [-1.0] * len(self.nontargets))

    @property
    def probe_levels(self) -> list[int]:
        return sorted(j for j, odors in self.probes.items() if odors)

    def probe_inputs(self, j: int) -> np.ndarray:
        key = ("probe", j)
        if key not in self._cache:
            self._cache[key] = embed_many(self.probes.get(j, ()), self.projection)
        return self._cache[key]

    def without_probes(self) -> TaskDataset:
        return TaskDataset(self.target, self.nontargets, {}, self.projection, self.seed)

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "n": self.n,
            "seed": self.seed,
            "d_embed": self.projection.d_embed,
            "projection_seed": self.projection.seed,
            "target": list(self.target.indices),
            "nontargets": [list(o.indices) for o in self.nontargets],
            "probes": {str(j): [list(o.indices) for o in self.probes[j]]
                       for j in sorted(self.probes)},
        }

    @classmethod
    def from_json(cls, doc: dict) -> TaskDataset:
        k = int(doc["k"])
        proj = ProjectionMap.from_seed(int(doc["d_embed"]), k, int(doc["projection_seed"]))
        target = OdorVector(tuple(doc["target"]), k)
        if target.n != int(doc["n"]):
            raise InvalidParameterError("target length disagrees with n")
        nontargets = tuple(OdorVector(tuple(o), k) for o in doc["nontargets"])
        probes = {int(j): tuple(OdorVector(tuple(o), k) for o in odors)
                  for j, odors in doc["probes"].items()}
        return cls(target, nontargets, probes, proj, doc.get("seed"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> TaskDataset:
        return cls.from_json(json.loads(Path(path).read_text()))


def _draw_unique(count, draw, exclude, what):
    seen = set(exclude)
    out = []
    attempts = 0
    while len(out) < count:
        if attempts >= MAX_DRAWS:
            raise CapacityError(f"could not draw {count} distinct {what} "
                                f"within {MAX_DRAWS} attempts")
        attempts += 1
        cand = draw()
        if cand not in seen:
            seen.add(cand)
            out.append(cand)
    return out


def gen_task(k: int, n: int, m_nontargets: int, probes_per_level: Mapping[int, int],
             rng: np.random.Generator, projection: ProjectionMap | None = None,
             d_embed: int = DEFAULT_D_EMBED, seed: int | None = None) -> TaskDataset:
    """Draw a target, ``m_nontargets`` disjoint nontargets and overlap-graded probes.

    ``probes_per_level`` maps an overlap level j in [0, n] to a probe count.
    Level-0 probes are fresh zero-overlap odors that are not training
    nontargets. The non-target part of a probe is drawn from the full
    non-target odorant pool, independently across probes.
    """
    if not 1 <= n <= k:
        raise InvalidParameterError(f"need 1 <= n <= k, got n={n}, k={k}")
    if m_nontargets < 0:
        raise InvalidParameterError("m_nontargets must be nonnegative")
    pool_size = k - n
    max_nontargets = math.comb(pool_size, n)
    if m_nontargets > max_nontargets:
        raise CapacityError(f"m_nontargets={m_nontargets} exceeds C(k-n, n)={max_nontargets}")
    for j, count in probes_per_level.items():
        if not 0 <= j <= n:
            raise InvalidParameterError(f"probe level {j} outside [0, {n}]")
        if count < 0:
            raise InvalidParameterError(f"negative probe count at level {j}")
        cap = math.comb(n, j) * math.comb(pool_size, n - j)
        if j == 0:
            cap -= m_nontargets
        if count > cap:
            raise CapacityError(f"{count} probes at level {j} exceeds the "
                                f"C(n, j)*C(k-n, n-j) bound of {cap}")

    target_idx = np.sort(rng.choice(k, size=n, replace=False))
    pool = np.setdiff1d(np.arange(k), target_idx)

    def draw_nontarget():
        return tuple(sorted(int(i) for i in rng.choice(pool, size=n, replace=False)))

    nontarget_idx = _draw_unique(m_nontargets, draw_nontarget, (), "nontargets")

    probe_idx = {}
    for j in sorted(probes_per_level):
        def draw_probe(j=j):
            shared = rng.choice(target_idx, size=j, replace=False)
            rest = rng.choice(pool, size=n - j, replace=False)
            return tuple(sorted(int(i) for i in np.concatenate([shared, rest])))

        exclude = nontarget_idx if j == 0 else ()
        probe_idx[j] = _draw_unique(probes_per_level[j], draw_probe, exclude,
                                    f"probes at level {j}")

    if projection is None:
        projection = ProjectionMap.from_seed(d_embed, k, int(rng.integers(2**63 - 1)))
    elif projection.k != k:
        raise InvalidParameterError("projection column count must equal k")

    target = OdorVector(tuple(target_idx), k)
    return TaskDataset(
        target=target,
        nontargets=tuple(OdorVector(o, k) for o in nontarget_idx),
        probes={j: tuple(OdorVector(o, k) for o in odors) for j, odors in probe_idx.items()},
        projection=projection,
        seed=seed,
    )


def make_task(k: int = 100, n: int = 10, m_nontargets: int = 200,
              probes_per_level: Mapping[int, int] | None = None,
              d_embed: int = DEFAULT_D_EMBED, seed: int = 0) -> TaskDataset:
    """Seeded convenience wrapper around :func:`gen_task`."""
    if probes_per_level is None:
        probes_per_level = {1: 20}
    rng = np.random.default_rng(seed)
    return gen_task(k, n, m_nontargets, probes_per_level, rng, d_embed=d_embed, seed=seed)
