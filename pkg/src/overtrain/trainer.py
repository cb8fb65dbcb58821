"""Full-batch gradient descent on the odor task.

One epoch is one gradient step on the (class-weighted) mean loss over all
training odors. Probe odors are only ever evaluated, never trained on.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DivergenceError, InvalidParameterError
from .nets import (BioNetParams, LossSpec, MlpParams, bio_forward, bio_grad, ce_loss,
                   hinge_loss, mlp_forward, mlp_grad)
from .odortask import TaskDataset
from .tables import write_csv

DIVERGENCE_LOSS = 1e6


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10_000
    learning_rate: float = 0.5
    seed: int = 0
    loss: LossSpec = field(default_factory=LossSpec)
    snapshot_epochs: tuple[int, ...] = ()
    eval_every: int = 10
    target_upweight: float = 1e3
    weight_decay: float = 0.0
    probe_label: str = "nontarget"
    snapshot_on_fit: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidParameterError("epochs must be nonnegative")
        if self.learning_rate < 0:
            raise InvalidParameterError("learning_rate must be nonnegative")
        if self.eval_every < 1:
            raise InvalidParameterError("eval_every must be >= 1")
        if self.target_upweight <= 0:
            raise InvalidParameterError("target_upweight must be positive")
        if self.weight_decay < 0:
            raise InvalidParameterError("weight_decay must be nonnegative")
        if self.probe_label not in ("nontarget", "target"):
            raise InvalidParameterError("probe_label must be 'nontarget' or 'target'")
        snaps = tuple(sorted(set(int(e) for e in self.snapshot_epochs)))
        if snaps and (snaps[0] < 0 or snaps[-1] > self.epochs):
            raise InvalidParameterError(f"snapshot epochs must lie in [0, {self.epochs}]")
        object.__setattr__(self, "snapshot_epochs", snaps)


@dataclass
class RepresentationSnapshot:
    epoch: int
    activations: np.ndarray
    labels: list[str]

    @property
    def train_mask(self) -> np.ndarray:
        return np.array([lab in ("target", "nontarget") for lab in self.labels])

    def train_view(self):
        """(activations, signed labels) restricted to training odors."""
        m = self.train_mask
        y = np.array([1.0 if lab == "target" else -1.0
                      for lab, keep in zip(self.labels, m) if keep])
        return self.activations[m], y

    def rows_for(self, tag: str) -> np.ndarray:
        return self.activations[np.array([lab == tag for lab in self.labels])]


@dataclass
class TrainLog:
    levels: list[int]
    rows: list[dict] = field(default_factory=list)
    first_fit_epoch: int | None = None
    first_zero_loss_epoch: int | None = None

    @property
    def epochs(self) -> list[int]:
        return [r["epoch"] for r in self.rows]

    def column(self, name: str) -> np.ndarray:
        return np.array([r.get(name, math.nan) for r in self.rows], dtype=float)

    def row_at(self, epoch: int) -> dict:
        """Last logged row at or before ``epoch``."""
        best = None
        for r in self.rows:
            if r["epoch"] <= epoch:
                best = r
        if best is None:
            raise KeyError(epoch)
        return best

    def columns(self) -> list[str]:
        return (["epoch", "train_loss", "train_acc", "probe_loss"]
                + [f"probe_acc_j{j}" for j in self.levels] + ["margin"]
                + [f"fisher_j{j}" for j in self.levels])

    def to_csv(self, path) -> None:
        cols = self.columns()
        write_csv(path, cols, ([r.get(c) for c in cols] for r in self.rows))


# --------------------------------------------------------------------------

class _Model:
    """Dispatch between the MLP and the piriform-style network."""

    def __init__(self, params):
        if isinstance(params, MlpParams):
            self.kind = "mlp"
        elif isinstance(params, BioNetParams):
            self.kind = "bio"
        else:
            raise InvalidParameterError(f"cannot train {type(params).__name__}")

    def forward_train(self, params, X, rng):
        if self.kind == "mlp":
            hidden, logit = mlp_forward(params, X)
            return (hidden, logit), logit
        acts, logit = bio_forward(params, X, "train", rng)
        return acts, logit

    def grad(self, params, X, cache, dlogit):
        if self.kind == "mlp":
            return mlp_grad(params, X, cache[0], dlogit)
        return bio_grad(params, cache, dlogit)

    def evaluate(self, params, X):
        """Eval-mode ``(representation, logit)``."""
        if self.kind == "mlp":
            return mlp_forward(params, X)
        acts, logit = bio_forward(params, X, "eval")
        return acts.layer3, logit


def _objective(logit, signed, loss: LossSpec, weights=None):
    """Weighted mean loss and per-example d(objective)/d(logit)."""
    if loss.variant == "cross_entropy":
        ell, d = ce_loss(logit, (signed > 0).astype(float))
    else:
        ell, d = hinge_loss(logit, signed, loss.C)
    if weights is None:
        weights = np.ones_like(ell)
    wsum = weights.sum()
    return float(weights @ ell / wsum), d * weights / wsum


def _probe_signs(dataset: TaskDataset, j: int, probe_label: str) -> np.ndarray:
    sign = -1.0 if probe_label == "nontarget" else 1.0
    return np.full(len(dataset.probes.get(j, ())), sign)


def evaluate_probes(params, dataset: TaskDataset, probe_label: str = "nontarget") -> dict[int, float]:
    """Per-level fraction of probes classified as ``probe_label``.

    Probes are scored as nontargets by default: they are held-out odors that
    are not the target, and the interesting question is whether the model
    keeps them apart from it. Empty levels are omitted.
    """
    model = _Model(params)
    out = {}
    for j in dataset.probe_levels:
        _, logit = model.evaluate(params, dataset.probe_inputs(j))
        out[j] = float(np.mean((logit > 0) == (_probe_signs(dataset, j, probe_label) > 0)))
    return out


def _snapshot(model, params, dataset, epoch) -> RepresentationSnapshot:
    blocks = [dataset.embedded_inputs]
    labels = ["target"] + ["nontarget"] * len(dataset.nontargets)
    for j in dataset.probe_levels:
        blocks.append(dataset.probe_inputs(j))
        labels += [f"probe_{j}"] * len(dataset.probes[j])
    rep, _ = model.evaluate(params, np.vstack(blocks))
    return RepresentationSnapshot(epoch, np.array(rep, copy=True), labels)


def train(params, dataset: TaskDataset, config: TrainConfig):
    """Run full-batch GD; returns ``(final_params, TrainLog, snapshots)``.

    Snapshots are taken in eval mode at ``config.snapshot_epochs`` and, when
    ``snapshot_on_fit`` is set, also at the first epoch with perfect training
    accuracy and the first epoch with exactly zero training loss.
    """
    model = _Model(params)
    rng = np.random.default_rng(config.seed)
    X = dataset.embedded_inputs
    signed = dataset.labels
    weights = np.where(signed > 0, config.target_upweight, 1.0)
    levels = dataset.probe_levels
    log = TrainLog(levels=levels)
    snaps: dict[int, RepresentationSnapshot] = {}
    snapshot_set = set(config.snapshot_epochs)

    for epoch in range(config.epochs + 1):
        cache, logit = model.forward_train(params, X, rng)
        obj, dlogit = _objective(logit, signed, config.loss, weights)
        if model.kind == "mlp":
            eval_logit, eval_obj = logit, obj
        else:
            _, eval_logit = model.evaluate(params, X)
            eval_obj, _ = _objective(eval_logit, signed, config.loss, weights)
        if not math.isfinite(eval_obj) or eval_obj > DIVERGENCE_LOSS:
            raise DivergenceError(epoch, eval_obj)

        train_acc = float(np.mean((eval_logit > 0) == (signed > 0)))
        fit_now = log.first_fit_epoch is None and train_acc == 1.0
        zero_now = log.first_zero_loss_epoch is None and eval_obj == 0.0
        if fit_now:
            log.first_fit_epoch = epoch
        if zero_now:
            log.first_zero_loss_epoch = epoch

        if epoch % config.eval_every == 0 or epoch == config.epochs or fit_now or zero_now \
                or epoch in snapshot_set:
            row = {"epoch": epoch, "train_loss": eval_obj, "train_acc": train_acc}
            probe_losses = []
            for j in levels:
                _, plogit = model.evaluate(params, dataset.probe_inputs(j))
                ps = _probe_signs(dataset, j, config.probe_label)
                row[f"probe_acc_j{j}"] = float(np.mean((plogit > 0) == (ps > 0)))
                if config.loss.variant == "cross_entropy":
                    ell, _ = ce_loss(plogit, (ps > 0).astype(float))
                else:
                    ell, _ = hinge_loss(plogit, ps, config.loss.C)
                probe_losses.append(ell)
            row["probe_loss"] = float(np.mean(np.concatenate(probe_losses))) if probe_losses else math.nan
            log.rows.append(row)

        if epoch in snapshot_set or (config.snapshot_on_fit and (fit_now or zero_now)):
            snaps[epoch] = _snapshot(model, params, dataset, epoch)

        if epoch == config.epochs:
            break
        grads = model.grad(params, X, cache, dlogit)
        if config.weight_decay:
            grads = grads.with_arrays({k: g + config.weight_decay * p for (k, g), p in
                                       zip(grads.arrays().items(), params.arrays().values())})
        params = params.step(grads, config.learning_rate)

    return params, log, [snaps[e] for e in sorted(snaps)]


def ablate_hinge(params, dataset: TaskDataset, config_ce: TrainConfig, config_hinge: TrainConfig):
    """Train the same initialization under cross-entropy and under hinge loss.

    Returns ``((log_ce, snaps_ce), (log_hinge, snaps_hinge))``.
    """
    if config_ce.loss.variant != "cross_entropy" or config_hinge.loss.variant != "hinge":
        raise InvalidParameterError("expected one cross-entropy and one hinge config")
    if replace(config_ce, loss=config_hinge.loss) != config_hinge:
        raise InvalidParameterError("ablation configs may differ only in the loss")
    _, log_ce, snaps_ce = train(params, dataset, config_ce)
    _, log_h, snaps_h = train(params, dataset, config_hinge)
    return (log_ce, snaps_ce), (log_h, snaps_h)


def annotate_log(log: TrainLog, snapshots, analysis) -> None:
    """Copy per-snapshot analysis values (margin, fisher_j*) into log rows.

    ``analysis`` maps epoch -> dict of column values.
    """
    by_epoch = {r["epoch"]: r for r in log.rows}
    for snap in snapshots:
        row = by_epoch.get(snap.epoch)
        if row is not None:
            row.update(analysis.get(snap.epoch, {}))


def write_snapshot(snapshot: RepresentationSnapshot, stem) -> None:
    """Write activations in checkpoint format plus a labels sidecar CSV."""
    stem = Path(stem)
    doc = {"kind": "snapshot", "epoch": snapshot.epoch,
           "arrays": {"activations": {"shape": list(snapshot.activations.shape),
                                      "data": [float(v) for v in snapshot.activations.ravel()]}}}
    stem.with_suffix(".json").write_text(json.dumps(doc) + "\n")
    write_csv(stem.with_name(stem.name + "_labels.csv"), ["row", "label"],
              enumerate(snapshot.labels))

