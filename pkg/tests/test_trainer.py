import csv
import json

import numpy as np
import pytest

from overtrain.errors import DivergenceError, InvalidParameterError
from overtrain.nets import LossSpec, bio_forward, hinge_loss, init_bio, init_mlp, mlp_forward
from overtrain.odortask import gen_task, make_task
from overtrain.trainer import (TrainConfig, ablate_hinge, annotate_log, evaluate_probes, train,
                               write_snapshot)


def small_task(seed=0, probes=None):
    probes = {1: 6, 2: 6} if probes is None else probes
    return make_task(30, 3, 20, probes, d_embed=40, seed=seed)


def small_model(task, seed=0, hidden=16):
    return init_mlp(task.projection.d_embed, hidden, np.random.default_rng(seed))


def test_zero_learning_rate_leaves_model_untouched():
    task = small_task()
    p = small_model(task)
    q, _, _ = train(p, task, TrainConfig(epochs=25, learning_rate=0.0))
    assert q.equals(p)


def test_two_point_toy_set_is_fit():
    task = gen_task(12, 2, 1, {}, np.random.default_rng(4), d_embed=10)
    p = init_mlp(10, 8, np.random.default_rng(4))
    q, log, _ = train(p, task, TrainConfig(epochs=10_000, learning_rate=0.5, target_upweight=1.0,
                                           eval_every=1000))
    _, z = mlp_forward(q, task.embedded_inputs)
    assert np.all((z > 0) == (task.labels > 0))
    assert log.rows[-1]["train_acc"] == 1.0


def test_probes_never_touch_parameters():
    task = small_task(3)
    p = small_model(task, 3)
    cfg = TrainConfig(epochs=60, learning_rate=0.5, target_upweight=20.0)
    a, _, _ = train(p, task, cfg)
    b, _, _ = train(p, task.without_probes(), cfg)
    assert a.equals(b)


def test_training_is_deterministic(tmp_path):
    task = small_task(1)
    cfg = TrainConfig(epochs=80, snapshot_epochs=(0, 40, 80), target_upweight=20.0)
    runs = [train(small_model(task, 1), task, cfg) for _ in range(2)]
    runs[0][1].to_csv(tmp_path / "a.csv")
    runs[1][1].to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    for s, t in zip(runs[0][2], runs[1][2]):
        assert np.array_equal(s.activations, t.activations)


def test_small_learning_rate_gives_monotone_loss():
    task = make_task(probes_per_level={}, seed=0)
    p = init_mlp(task.projection.d_embed, 32, np.random.default_rng(0), init_scale=0.3)
    _, log, _ = train(p, task, TrainConfig(epochs=300, learning_rate=1e-3, eval_every=1))
    assert np.all(np.diff(log.column("train_loss")) <= 1e-9)


def test_log_structure_and_csv(tmp_path):
    task = small_task()
    _, log, _ = train(small_model(task), task, TrainConfig(epochs=35, eval_every=10,
                                                           target_upweight=20.0))
    epochs = log.epochs
    assert epochs[0] == 0 and epochs[-1] == 35 and all(a < b for a, b in zip(epochs, epochs[1:]))
    for col in ("train_acc", "probe_acc_j1", "probe_acc_j2"):
        v = log.column(col)
        assert np.all((v >= 0) & (v <= 1))
    log.to_csv(tmp_path / "log.csv")
    raw = (tmp_path / "log.csv").read_bytes()
    assert b"\r" not in raw
    rows = list(csv.reader(raw.decode().splitlines()))
    assert rows[0] == ["epoch", "train_loss", "train_acc", "probe_loss", "probe_acc_j1",
                       "probe_acc_j2", "margin", "fisher_j1", "fisher_j2"]
    assert len(rows) == len(epochs) + 1
    # 17 significant digits, empty cells for values that were not computed
    loss = rows[1][1]
    assert float(loss) == log.rows[0]["train_loss"] and rows[1][6] == ""


def test_annotate_log_fills_analysis_columns():
    task = small_task()
    _, log, snaps = train(small_model(task), task, TrainConfig(epochs=20, snapshot_epochs=(0, 20)))
    annotate_log(log, snaps, {0: {"margin": 1.5, "fisher_j1": 2.0}})
    assert log.row_at(0)["margin"] == 1.5 and "margin" not in log.row_at(20)


def test_snapshots_layout_and_sidecar(tmp_path):
    task = small_task()
    cfg = TrainConfig(epochs=30, snapshot_epochs=(0, 30), snapshot_on_fit=False)
    _, _, snaps = train(small_model(task), task, cfg)
    assert [s.epoch for s in snaps] == [0, 30]
    s = snaps[-1]
    assert s.activations.shape == (21 + 12, 16) and np.all(s.activations >= 0)
    assert s.labels[:2] == ["target", "nontarget"] and s.labels[-1] == "probe_2"
    X, y = s.train_view()
    assert X.shape[0] == 21 and y[0] == 1 and np.all(y[1:] == -1)
    write_snapshot(s, tmp_path / "snap")
    doc = json.loads((tmp_path / "snap.json").read_text())
    assert doc["arrays"]["activations"]["shape"] == [33, 16]
    lines = (tmp_path / "snap_labels.csv").read_text().splitlines()
    assert lines[0] == "row,label" and lines[1] == "0,target" and len(lines) == 34


def test_fit_epochs_are_snapshotted():
    task = small_task()
    cfg = TrainConfig(epochs=400, loss=LossSpec("hinge"), target_upweight=20.0)
    _, log, snaps = train(small_model(task), task, cfg)
    assert log.first_fit_epoch is not None
    assert {log.first_fit_epoch, log.first_zero_loss_epoch} <= {s.epoch for s in snaps}


def test_snapshot_epochs_validated():
    with pytest.raises(InvalidParameterError):
        TrainConfig(epochs=10, snapshot_epochs=(11,))
    assert TrainConfig(epochs=10, snapshot_epochs=(5, 1, 5)).snapshot_epochs == (1, 5)


def test_divergence_reports_epoch():
    task = small_task()
    p = small_model(task)
    with pytest.raises(DivergenceError) as exc:
        train(p, task, TrainConfig(epochs=200, learning_rate=1e4, loss=LossSpec("hinge")))
    assert exc.value.epoch >= 1


def test_hinge_parameters_freeze_at_zero_loss():
    task = small_task(2)
    p = small_model(task, 2)
    cfg = TrainConfig(epochs=500, loss=LossSpec("hinge"), target_upweight=20.0)
    _, log, _ = train(p, task, cfg)
    z0 = log.first_zero_loss_epoch
    assert z0 is not None
    frozen, _, _ = train(p, task, TrainConfig(epochs=z0, loss=LossSpec("hinge"), target_upweight=20.0))
    later, _, _ = train(p, task, cfg)
    assert frozen.equals(later)
    _, z = mlp_forward(later, task.embedded_inputs)
    assert hinge_loss(z, task.labels)[0].sum() == 0


def test_probe_accuracy_of_untrained_models_is_chance():
    task = make_task(30, 3, 20, {1: 9}, d_embed=40, seed=0)
    acc = np.array([evaluate_probes(init_mlp(40, 16, np.random.default_rng(s)), task)[1]
                    for s in range(100)])
    se = acc.std(ddof=1) / np.sqrt(len(acc))
    assert abs(acc.mean() - 0.5) < 3 * se


def test_zero_overlap_probes_track_nontarget_accuracy():
    task = make_task(30, 3, 40, {0: 40}, d_embed=40, seed=5)
    q, log, _ = train(small_model(task, 5), task, TrainConfig(epochs=400, target_upweight=40.0))
    _, z = mlp_forward(q, task.embedded_inputs[1:])
    assert abs(evaluate_probes(q, task)[0] - np.mean(z < 0)) < 0.15


def test_probe_scoring_convention():
    task = small_task()
    p = small_model(task)
    as_non = evaluate_probes(p, task)
    as_target = evaluate_probes(p, task, probe_label="target")
    for j in as_non:
        assert as_non[j] + as_target[j] == pytest.approx(1.0)
    assert 0 not in evaluate_probes(p, small_task(probes={0: 0, 1: 2}))


def test_bio_model_trains():
    task = small_task()
    p = init_bio(40, 20, 10, np.random.default_rng(0))
    q, log, snaps = train(p, task, TrainConfig(epochs=50, snapshot_epochs=(50,)))
    inputs = np.vstack([task.embedded_inputs] + [task.probe_inputs(j) for j in task.probe_levels])
    # snapshots hold the leaky modulatory layer in eval mode
    assert np.array_equal(snaps[-1].activations, bio_forward(q, inputs)[0].layer3)
    assert np.all(np.isfinite(log.column("train_loss")))


def test_ablate_hinge_pairs_runs():
    task = small_task()
    p = small_model(task)
    ce = TrainConfig(epochs=30, target_upweight=20.0)
    hinge = TrainConfig(epochs=30, target_upweight=20.0, loss=LossSpec("hinge"))
    (log_ce, _), (log_h, _) = ablate_hinge(p, task, ce, hinge)
    assert log_ce.epochs[0] == log_h.epochs[0] == 0 and log_ce.epochs[-1] == log_h.epochs[-1] == 30
    with pytest.raises(InvalidParameterError):
        ablate_hinge(p, task, ce, TrainConfig(epochs=31, loss=LossSpec("hinge")))
    with pytest.raises(InvalidParameterError):
        ablate_hinge(p, task, hinge, ce)
