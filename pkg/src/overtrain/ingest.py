"""Spike recordings: NDJSON I/O, windowed counts, preprocessing and surrogates.

One NDJSON line holds one trial:
``{"session", "subject", "trial", "label", "spikes_ms": {neuron_id: [times]}}``
with spike times in ms inside the 2500 ms response window.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyMatrixError, InvalidParameterError, ParseError, ValidationError
from .popanalysis import PopulationMatrix, write_population_csv

RESPONSE_WINDOW_MS = 2500.0
DEFAULT_WINDOW = (2000.0, 2500.0)
MIN_TOTAL_SPIKES = 4
LABELS = ("target", "nontarget")


@dataclass(frozen=True)
class SpikeTrial:
    trial_id: int
    label: str
    spikes: dict[str, tuple[float, ...]]


@dataclass(frozen=True)
class SpikeSession:
    session_id: str
    subject_id: str
    trials: tuple[SpikeTrial, ...]

    def __post_init__(self):
        object.__setattr__(self, "trials", tuple(self.trials))
        validate_session(self)

    @property
    def neuron_ids(self) -> list[str]:
        return list(self.trials[0].spikes)

    @property
    def labels(self) -> list[str]:
        return [t.label for t in self.trials]


def _check_trial(trial: SpikeTrial, where: str) -> None:
    if trial.label not in LABELS:
        raise ValidationError(f"{where}: label must be 'target' or 'nontarget', got {trial.label!r}")
    for nid, times in trial.spikes.items():
        arr = np.asarray(times, dtype=float)
        if arr.size and not np.all(np.isfinite(arr)):
            raise ValidationError(f"{where}: neuron {nid} has non-finite spike times")
        if arr.size and (arr.min() < 0 or arr.max() > RESPONSE_WINDOW_MS):
            raise ValidationError(f"{where}: neuron {nid} has spike times outside "
                                  f"[0, {RESPONSE_WINDOW_MS:g}] ms")
        if np.any(np.diff(arr) < 0):
            raise ValidationError(f"{where}: neuron {nid} spike times are not sorted")


def validate_session(session: SpikeSession) -> None:
    if not session.trials:
        raise ValidationError("session has no trials; at least 1 is required")
    ids = session.trials[0].spikes.keys()
    seen = set()
    for trial in session.trials:
        where = f"trial {trial.trial_id}"
        if trial.trial_id in seen:
            raise ValidationError(f"{where}: duplicate trial id")
        seen.add(trial.trial_id)
        if trial.spikes.keys() != ids:
            raise ValidationError(f"{where}: neuron ids differ from the first trial")
        _check_trial(trial, where)


def _trial_from_doc(doc, lineno):
    if not isinstance(doc, dict):
        raise ParseError("expected a JSON object", line=lineno)
    required = {"session": str, "subject": str, "trial": int, "label": str, "spikes_ms": dict}
    for key, typ in required.items():
        if key not in doc:
            raise ParseError(f"missing key {key!r}", line=lineno)
        val = doc[key]
        if not isinstance(val, typ) or (typ is int and isinstance(val, bool)):
            raise ParseError(f"key {key!r} must be {typ.__name__}", line=lineno)
    extra = set(doc) - set(required)
    if extra:
        raise ParseError(f"unknown keys {sorted(extra)}", line=lineno)
    spikes = {}
    for nid, times in doc["spikes_ms"].items():
        if not isinstance(times, list) or not all(
                isinstance(t, (int, float)) and not isinstance(t, bool) for t in times):
            raise ParseError(f"spikes for neuron {nid!r} must be a list of numbers", line=lineno)
        spikes[nid] = tuple(float(t) for t in times)
    trial = SpikeTrial(doc["trial"], doc["label"], spikes)
    _check_trial(trial, f"line {lineno}")
    return doc["session"], doc["subject"], trial


def parse_spike_file(path) -> SpikeSession:
    """Read and validate an NDJSON spike file (blank lines are skipped)."""
    sessions, subjects, trials = set(), set(), []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON: {exc.msg}", line=lineno) from None
            session, subject, trial = _trial_from_doc(doc, lineno)
            if trials and (session not in sessions or subject not in subjects):
                raise ValidationError(f"line {lineno}: session/subject differs from earlier lines")
            sessions.add(session)
            subjects.add(subject)
            trials.append(trial)
    if not trials:
        raise ValidationError("spike file has no trials; at least 1 is required")
    return SpikeSession(sessions.pop(), subjects.pop(), tuple(trials))


def write_spike_file(session: SpikeSession, path) -> None:
    lines = []
    for t in session.trials:
        doc = {"session": session.session_id, "subject": session.subject_id,
               "trial": t.trial_id, "label": t.label,
               "spikes_ms": {nid: list(times) for nid, times in t.spikes.items()}}
        lines.append(json.dumps(doc, separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------

@dataclass
class CountMatrix:
    counts: np.ndarray
    window: tuple[float, float]
    neuron_ids: list[str]
    labels: list[str]
    trial_ids: list[int] = field(default_factory=list)

    def to_population(self) -> PopulationMatrix:
        return PopulationMatrix(self.counts.astype(float), np.array(self.labels),
                                unit_ids=list(self.neuron_ids))

    def to_csv(self, path, labels_path) -> None:
        write_population_csv(self.to_population(), path, labels_path)


def window_counts(session: SpikeSession, window=DEFAULT_WINDOW) -> CountMatrix:
    """Spike counts per trial and neuron in the half-open window [start, end)."""
    start, end = float(window[0]), float(window[1])
    if not 0 <= start < end <= RESPONSE_WINDOW_MS:
        raise InvalidParameterError(f"window must satisfy 0 <= start < end <= "
                                    f"{RESPONSE_WINDOW_MS:g}, got [{start:g}, {end:g}]")
    ids = session.neuron_ids
    counts = np.zeros((len(session.trials), len(ids)), dtype=np.int64)
    for i, trial in enumerate(session.trials):
        for j, nid in enumerate(ids):
            times = np.asarray(trial.spikes[nid], dtype=float)
            counts[i, j] = np.searchsorted(times, end, "left") - np.searchsorted(times, start, "left")
    return CountMatrix(counts, (start, end), ids, session.labels,
                       [t.trial_id for t in session.trials])


def drop_unresponsive(counts: CountMatrix, min_total: int = MIN_TOTAL_SPIKES):
    """Remove neurons with fewer than ``min_total`` spikes summed over trials."""
    totals = counts.counts.sum(0)
    keep = totals >= min_total
    if not keep.any():
        raise EmptyMatrixError(f"every neuron has fewer than {min_total} spikes")
    dropped = [nid for nid, k in zip(counts.neuron_ids, keep) if not k]
    kept = CountMatrix(counts.counts[:, keep], counts.window,
                       [nid for nid, k in zip(counts.neuron_ids, keep) if k],
                       list(counts.labels), list(counts.trial_ids))
    return kept, dropped


# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SurrogateSpec:
    """Poisson surrogate session.

    Class rates are ``mid +/- separation * (rate_target - rate_nontarget) / 2``
    per neuron, clipped at 0, where ``mid`` is the mean of the two rate
    vectors. ``separation = 1`` reproduces the given rates.
    """
    n_target: int
    n_nontarget: int
    rate_target: tuple[float, ...]
    rate_nontarget: tuple[float, ...]
    separation: float = 1.0
    seed: int = 0
    window_ms: tuple[float, float] = (0.0, RESPONSE_WINDOW_MS)
    session_id: str = "surrogate"
    subject_id: str = "synthetic"

    def __post_init__(self):
        object.__setattr__(self, "rate_target", tuple(float(r) for r in self.rate_target))
        object.__setattr__(self, "rate_nontarget", tuple(float(r) for r in self.rate_nontarget))
        if self.n_target < 1 or self.n_nontarget < 1:
            raise InvalidParameterError("each class needs at least one trial")
        if len(self.rate_target) != len(self.rate_nontarget) or not self.rate_target:
            raise InvalidParameterError("rate vectors must be non-empty and equally long")
        if min(self.rate_target + self.rate_nontarget) < 0:
            raise InvalidParameterError("rates must be nonnegative")
        if not self.separation >= 0:
            raise InvalidParameterError("separation must be nonnegative")
        lo, hi = self.window_ms
        if not 0 <= lo < hi <= RESPONSE_WINDOW_MS:
            raise InvalidParameterError("surrogate window must lie inside the response window")

    @property
    def n_neurons(self) -> int:
        return len(self.rate_target)

    def class_rates(self):
        t, n = np.array(self.rate_target), np.array(self.rate_nontarget)
        mid, half = (t + n) / 2, (t - n) / 2
        return (np.clip(mid + self.separation * half, 0, None),
                np.clip(mid - self.separation * half, 0, None))

    @classmethod
    def simple(cls, n_trials: int, n_neurons: int, base_rate: float = 10.0,
               rate_gap: float = 4.0, separation: float = 1.0, seed: int = 0, **kw):
        """Equal class sizes; each neuron prefers one class by ``rate_gap`` Hz.

        Preferences alternate across neurons so both classes drive half the
        population.
        """
        sign = np.where(np.arange(n_neurons) % 2 == 0, 1.0, -1.0)
        return cls(n_trials, n_trials, tuple(base_rate + sign * rate_gap / 2),
                   tuple(base_rate - sign * rate_gap / 2), separation, seed, **kw)

    def to_json(self) -> dict:
        return {"n_target": self.n_target, "n_nontarget": self.n_nontarget,
                "rate_target": list(self.rate_target), "rate_nontarget": list(self.rate_nontarget),
                "separation": self.separation, "seed": self.seed,
                "window_ms": list(self.window_ms), "session_id": self.session_id,
                "subject_id": self.subject_id}

    @classmethod
    def from_json(cls, doc: dict) -> SurrogateSpec:
        allowed = set(cls.__dataclass_fields__)
        unknown = set(doc) - allowed
        if unknown:
            raise ValidationError(f"unknown surrogate keys {sorted(unknown)}")
        doc = dict(doc)
        if "window_ms" in doc:
            doc["window_ms"] = tuple(doc["window_ms"])
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ValidationError(str(exc)) from None


def surrogate_session(spec: SurrogateSpec) -> SpikeSession:
    """Poisson counts at the class rate over the window; uniform sorted times.

    Target trials come first, then nontargets. Times are floored to 1 us.
    """
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.window_ms
    dur_s = (hi - lo) / 1000.0
    r_t, r_n = spec.class_rates()
    ids = [f"n{i}" for i in range(spec.n_neurons)]
    trials = []
    plan = [("target", r_t)] * spec.n_target + [("nontarget", r_n)] * spec.n_nontarget
    for tid, (label, rates) in enumerate(plan):
        counts = rng.poisson(rates * dur_s)
        spikes = {}
        for nid, c in zip(ids, counts):
            times = np.sort(rng.uniform(lo, hi, size=c))
            spikes[nid] = tuple(float(t) for t in np.floor(times * 1000) / 1000)
        trials.append(SpikeTrial(tid, label, spikes))
    return SpikeSession(spec.session_id, spec.subject_id, tuple(trials))


# --------------------------------------------------------------------------

def smooth_series(values, window_len: int, stride: int = 1):
    """Centered moving average with truncated edges.

    Returns ``(means, standard_errors)`` evaluated at every ``stride``-th
    index. The SE is the sample sd inside the window over the square root of
    the number of points actually used (0 for single-point windows).
    """
    x = np.asarray(values, dtype=float)
    if window_len < 1 or stride < 1:
        raise InvalidParameterError("window_len and stride must be >= 1")
    left, right = (window_len - 1) // 2, window_len // 2
    means, ses = [], []
    for i in range(0, len(x), stride):
        seg = x[max(0, i - left):min(len(x), i + right + 1)]
        means.append(seg.mean())
        spread = len(seg) > 1 and np.ptp(seg) > 0
        ses.append(seg.std(ddof=1) / math.sqrt(len(seg)) if spread else 0.0)
    return np.array(means), np.array(ses)
