"""Command-line driver: ``overtrain {synth,reversal,decode,surrogate}``.

Every subcommand is a pure function of its config, input files and seed.
Outputs are CSV/JSON plus a ``manifest.json`` holding the config hash, the
seed and a sha256 for every artifact written.

Exit codes: 0 success, 2 usage, 3 validation, 4 numeric failure,
5 session excluded.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .errors import OvertrainError, ValidationError
from .ingest import (SurrogateSpec, drop_unresponsive, parse_spike_file, surrogate_session,
                     window_counts, write_spike_file)
from .nets import LossSpec, init_bio, init_mlp
from .odortask import TaskDataset, make_task
from .popanalysis import (MarginSeries, fisher_discriminant, from_snapshot, kfold_decode,
                          margin_percentiles, margin_track, meanmatched_baseline, pca_project,
                          rsa, svm_fit, zscore)
from .reversal import empirical_reversal, integrate_phase1, integrate_phase2, kernel_direction_check
from .tables import write_csv
from .trainer import TrainConfig, TrainLog, annotate_log, train

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_EXCLUDED = 0, 2, 3, 4, 5


class SessionExcluded(Exception):
    pass


# --------------------------------------------------------------------------
# synthetic-model experiment

@dataclass
class SynthResult:
    task: TaskDataset
    log: TrainLog
    snapshots: list
    margins: MarginSeries
    fisher: dict = field(default_factory=dict)
    similarity: dict = field(default_factory=dict)
    pcs: dict = field(default_factory=dict)

    @property
    def t_c(self):
        return self.log.first_fit_epoch


def build_task(cfg: ExperimentConfig) -> TaskDataset:
    t = cfg.task
    return make_task(t.k, t.n, t.m_nontargets, t.probes_per_level, t.d_embed, cfg.train.seed)


def build_model(cfg: ExperimentConfig):
    m, seed = cfg.model, cfg.train.seed
    rng = np.random.default_rng([seed, 1])
    if m.kind == "mlp":
        return init_mlp(cfg.task.d_embed, m.widths[0], rng, m.init_scale)
    if m.kind == "bio":
        return init_bio(cfg.task.d_embed, m.widths[0], m.widths[1], rng, m.init_scale, m.noise_std)
    raise ValidationError("model.kind 'linear2' is only used by the reversal command")


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    tr = cfg.train
    snaps = tr.snapshot_epochs or range(0, tr.epochs + 1, max(1, tr.epochs // 10))
    return TrainConfig(epochs=tr.epochs, learning_rate=tr.lr, seed=tr.seed,
                       loss=LossSpec(tr.loss, tr.C), snapshot_epochs=tuple(snaps),
                       eval_every=tr.eval_every, target_upweight=tr.target_upweight)


def run_synth(cfg: ExperimentConfig) -> SynthResult:
    """Train, then analyse every snapshot from the first fit onward."""
    task = build_task(cfg)
    _, log, snaps = train(build_model(cfg), task, train_config(cfg))
    t_c = log.first_fit_epoch
    tracked = [s for s in snaps if t_c is not None and s.epoch >= t_c]
    margins = margin_track(tracked)
    result = SynthResult(task, log, snaps, margins)
    analysis = {}
    for snap in snaps:
        row = {}
        for j in task.probe_levels:
            pop = from_snapshot(snap, zscored=False, include_probes=True)
            J = fisher_discriminant(pop, ("target", f"probe_{j}"), min_class_trials=1).J
            result.fisher[(snap.epoch, j)] = J
            row[f"fisher_j{j}"] = J
        if snap.epoch in margins.epochs:
            row["margin"] = margins.at(snap.epoch).margin
        result.similarity[snap.epoch] = rsa(from_snapshot(snap), min_class_size=1)
        z = from_snapshot(snap, include_probes=True)
        result.pcs[snap.epoch] = (pca_project(z, 2)[0], list(z.labels))
        analysis[snap.epoch] = row
    annotate_log(log, snaps, analysis)
    return result


def _write_synth(cfg, result: SynthResult, out: Path) -> list[str]:
    written = ["trainlog.csv", "margins.csv", "rsa.csv"]
    result.log.to_csv(out / "trainlog.csv")
    pcts = cfg.analysis.percentiles
    rows = []
    for epoch, rep, norm in zip(result.margins.epochs, result.margins.reports,
                                result.margins.normalized):
        snap = next(s for s in result.snapshots if s.epoch == epoch)
        pm = margin_percentiles(rep, from_snapshot(snap, zscored=False), pcts)
        rows.append([epoch, rep.margin, norm] + [pm[p] for p in pcts])
    write_csv(out / "margins.csv",
              ["epoch", "margin", "normalized"] + [f"closest_{_pct(p)}pct" for p in pcts], rows)
    write_csv(out / "rsa.csv", ["epoch", "within_target", "within_nontarget", "cross"],
              [[e, s.mean_within_target, s.mean_within_nontarget, s.mean_cross]
               for e, s in sorted(result.similarity.items())])
    for epoch, (proj, labels) in sorted(result.pcs.items()):
        name = f"pca_epoch{epoch}.csv"
        write_csv(out / name, ["row", "label", "pc1", "pc2"],
                  [[i, lab, a, b] for i, (lab, (a, b)) in enumerate(zip(labels, proj))])
        written.append(name)
    return written


def _pct(p):
    return str(int(p)) if float(p).is_integer() else str(p).replace(".", "p")


def cmd_synth(cfg: ExperimentConfig, out: Path) -> int:
    result = run_synth(cfg)
    if result.t_c is None:
        print("overtrain synth: training never reached perfect accuracy; "
              "margins.csv has no rows", file=sys.stderr)
    out.mkdir(parents=True, exist_ok=True)
    written = _write_synth(cfg, result, out)
    _finish(out, "synth", cfg, written)
    return EXIT_OK


# --------------------------------------------------------------------------
# reversal

def cmd_reversal(cfg: ExperimentConfig, out: Path) -> int:
    r = cfg.reversal
    out.mkdir(parents=True, exist_ok=True)
    written = ["theory_phase1.csv", "sweep.csv", "empirical.csv", "empirical_phase2.csv",
               "kernel_alignment.csv", "pcs.csv"]
    T_max = r.T_list[-1]
    integrate_phase1(r.gamma0, T_max, r.dt).to_csv(out / "theory_phase1.csv", with_lazy=True)
    sweep_rows = []
    for i, T in enumerate(r.T_list):
        K = integrate_phase1(r.gamma0, T, r.dt).K_yT
        traj = integrate_phase2(K, r.gamma0, r.dt, horizon=r.horizon, eps=r.eps)
        name = f"theory_phase2_T{i}.csv"
        traj.to_csv(out / name, with_lazy=True)
        written.append(name)
        sweep_rows.append([T, K, traj.time_to_threshold])
    write_csv(out / "sweep.csv", ["T", "K_yT", "reversal_time"], sweep_rows)

    T_steps = max(1, round(T_max / r.lr))
    horizon_steps = max(1, round(r.horizon / r.lr))
    pc_steps = sorted({round(T_steps * i / r.n_pc_checkpoints) for i in range(r.n_pc_checkpoints + 1)})
    emp = empirical_reversal(r.N, r.gamma0, None, T_steps, r.lr, cfg.train.seed, horizon_steps,
                             r.update_W1, pc_steps, r.eps, kernel_steps=pc_steps)
    theory1 = integrate_phase1(r.gamma0, T_max, r.dt)
    write_csv(out / "empirical.csv", ["step", "t", "f_y_empirical", "f_y_theory"],
              emp.comparison_rows(theory1))
    theory2 = integrate_phase2(theory1.K_yT, r.gamma0, r.dt, horizon=r.horizon, eps=r.eps)
    th2 = np.interp(emp.times2, theory2.times, theory2.f_rev_values)
    write_csv(out / "empirical_phase2.csv", ["step", "t", "f_rev_empirical", "f_rev_theory"],
              zip(range(len(emp.f_rev)), emp.times2, emp.f_rev, th2))
    write_csv(out / "kernel_alignment.csv", ["step", "fraction_yy"],
              sorted(kernel_direction_check(emp.kernels, emp.y_hat).items()))
    write_csv(out / "pcs.csv", ["step", "input", "positive", "pc1", "pc2"], emp.pc_rows())
    _finish(out, "reversal", cfg, written)
    return EXIT_OK


# --------------------------------------------------------------------------
# recorded (or surrogate) spike data

def cmd_decode(spike_file, cfg: ExperimentConfig, out: Path, exclude=()) -> int:
    a = cfg.analysis
    session = parse_spike_file(spike_file)
    if session.session_id in set(a.exclude) | set(exclude):
        raise SessionExcluded(f"session {session.session_id!r} is on the exclusion list")
    counts, dropped = drop_unresponsive(window_counts(session, a.window_ms), a.min_total_spikes)
    pop = zscore(counts.counts, counts.labels)
    rng = cfg.train.seed
    dec = kfold_decode(pop, a.folds, a.iterations, rng)
    sim = rsa(pop)
    svm = svm_fit(pop)
    base = meanmatched_baseline(pop, a.baseline_draws, rng)

    out.mkdir(parents=True, exist_ok=True)
    rows = [["mean_accuracy", "", "", dec.mean_accuracy],
            ["standard_error", "", "", dec.standard_error],
            ["posterior_mean", "", "", dec.posterior_mean],
            ["posterior_se", "", "", dec.posterior_se]]
    rows += [["posterior", tid, lab, p] for tid, lab, p in
             zip(counts.trial_ids, counts.labels, dec.posteriors)]
    write_csv(out / "decode.csv", ["row_type", "trial_id", "label", "value"], rows)
    margin_doc = svm.to_json()
    margin_doc["percentiles"] = {_pct(p): v for p, v in
                                 margin_percentiles(svm, pop, a.percentiles).items()}
    _dump(out / "rsa.json", sim.to_json())
    _dump(out / "margin.json", margin_doc)
    _dump(out / "baseline.json", base.to_json())
    _dump(out / "preprocessing.json", {
        "session": session.session_id, "subject": session.subject_id,
        "window_ms": list(counts.window), "dropped_unresponsive": dropped,
        "dropped_constant": [counts.neuron_ids[i] for i in pop.dropped_columns],
        "trials": pop.n_trials, "units": pop.n_units})
    _finish(out, "decode", cfg, ["decode.csv", "rsa.json", "margin.json", "baseline.json",
                                  "preprocessing.json"])
    return EXIT_OK


def load_surrogate_spec(path, seed=None) -> SurrogateSpec:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read surrogate spec {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ValidationError("surrogate spec must be a JSON object")
    if seed is not None:
        doc["seed"] = seed
    if "n_trials" in doc:
        try:
            return SurrogateSpec.simple(**doc)
        except TypeError as exc:
            raise ValidationError(str(exc)) from None
    return SurrogateSpec.from_json(doc)


def cmd_surrogate(spec: SurrogateSpec, out_path: Path) -> int:
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_spike_file(surrogate_session(spec), out_path)
    spec_text = json.dumps(spec.to_json(), sort_keys=True)
    manifest = {"command": "surrogate", "version": __version__, "seed": spec.seed,
                "spec_sha256": hashlib.sha256(spec_text.encode()).hexdigest(),
                "artifacts": {out_path.name: _sha256(out_path)}}
    _dump(out_path.with_name(out_path.name + ".manifest.json"), manifest)
    return EXIT_OK


# --------------------------------------------------------------------------

def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump(path, doc) -> None:
    Path(path).write_text(json.dumps(_clean(doc), sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _finish(out: Path, command: str, cfg: ExperimentConfig, written) -> None:
    (out / "config.json").write_text(cfg.canonical_json(), encoding="utf-8")
    names = sorted(set(written) | {"config.json"})
    _dump(out / "manifest.json", {
        "command": command, "version": __version__, "seed": cfg.train.seed,
        "config_sha256": cfg.sha256(),
        "artifacts": {n: _sha256(out / n) for n in names}})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="overtrain", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", type=Path, help="experiment config JSON (defaults if omitted)")
        p.add_argument("--out", type=Path, required=True, help=out_help)
        p.add_argument("--seed", type=int, help="override train.seed from the config")

    common(sub.add_parser("synth", help="train the odor model and analyse its snapshots"),
           "output directory")
    common(sub.add_parser("reversal", help="mean-field and empirical reversal experiment"),
           "output directory")
    p = sub.add_parser("decode", help="decode and analyse a spike file")
    p.add_argument("spike_file", type=Path, help="NDJSON spike file")
    common(p, "output directory")
    p.add_argument("--exclude", action="append", default=[], metavar="SESSION_ID",
                   help="skip this session (repeatable)")
    p = sub.add_parser("surrogate", help="write a Poisson surrogate spike file")
    p.add_argument("spec", type=Path, help="surrogate spec JSON")
    p.add_argument("--out", type=Path, required=True, help="output NDJSON path")
    p.add_argument("--seed", type=int, help="override the spec seed")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "surrogate":
            try:
                spec = load_surrogate_spec(args.spec, args.seed)
            except OvertrainError as exc:
                print(f"overtrain surrogate: invalid spec: {exc}", file=sys.stderr)
                return EXIT_USAGE
            return cmd_surrogate(spec, args.out)
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        cfg = cfg.with_seed(args.seed)
        if args.command == "synth":
            return cmd_synth(cfg, args.out)
        if args.command == "reversal":
            return cmd_reversal(cfg, args.out)
        return cmd_decode(args.spike_file, cfg, args.out, args.exclude)
    except SessionExcluded as exc:
        print(f"overtrain {args.command}: {exc}", file=sys.stderr)
        return EXIT_EXCLUDED
    except OvertrainError as exc:
        print(f"overtrain {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
