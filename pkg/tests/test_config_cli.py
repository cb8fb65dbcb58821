import csv
import json

import numpy as np
import pytest

from overtrain.cli import build_parser, main
from overtrain.config import ExperimentConfig
from overtrain.errors import ValidationError
from overtrain.ingest import parse_spike_file

SMALL = {
    "task": {"k": 30, "n": 3, "m_nontargets": 20, "probes": {"1": 5, "2": 5}, "d_embed": 40},
    "model": {"widths": [16], "init_scale": 1.0},
    "train": {"epochs": 150, "lr": 0.5, "target_upweight": 20.0, "eval_every": 10},
    "analysis": {"iterations": 2, "baseline_draws": 20},
    "reversal": {"T_list": [0.1, 0.5], "horizon": 2.0, "N": 40, "lr": 0.01, "dt": 0.01},
}


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------
# config

def test_defaults_validate_and_round_trip():
    cfg = ExperimentConfig()
    assert ExperimentConfig.from_dict(json.loads(cfg.canonical_json())) == cfg
    assert cfg.sha256() == ExperimentConfig.from_dict({}).sha256()


@pytest.mark.parametrize("doc", [
    {"bogus": {}},
    {"task": {"k": 100, "kk": 1}},
    {"train": {"lr": -0.1}},
    {"train": {"epochs": "many"}},
    {"train": {"loss": "mse"}},
    {"train": {"epochs": 10, "snapshot_epochs": [11]}},
    {"task": {"n": 0}},
    {"task": {"probes": {"11": 1}}},
    {"model": {"kind": "rnn"}},
    {"model": {"kind": "bio", "widths": [8, 16]}},
    {"analysis": {"folds": 1}},
    {"analysis": {"window_ms": [100, 2600]}},
    {"reversal": {"T_list": [2.0, 1.0]}},
    {"reversal": {"gamma0": 0}},
    {"reversal": {"update_W1": 1}},
])
def test_invalid_configs_rejected(doc):
    with pytest.raises(ValidationError):
        ExperimentConfig.from_dict(doc)


def test_numeric_widening_and_seed_override():
    cfg = ExperimentConfig.from_dict({"train": {"lr": 1}})
    assert cfg.train.lr == 1.0 and isinstance(cfg.train.lr, float)
    assert cfg.with_seed(7).train.seed == 7 and cfg.with_seed(None) is cfg
    with pytest.raises(ValidationError):
        cfg.with_seed(-1)


def test_load_reports_bad_json(tmp_path):
    (tmp_path / "c.json").write_text("{\n  oops")
    with pytest.raises(ValidationError, match="line 2"):
        ExperimentConfig.load(tmp_path / "c.json")
    with pytest.raises(ValidationError):
        ExperimentConfig.load(tmp_path / "missing.json")


# --------------------------------------------------------------------------
# argument handling and exit codes

def test_help_exits_zero_and_lists_flags(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    assert set(sub) == {"synth", "reversal", "decode", "surrogate"}
    decode_help = sub["decode"].format_help()
    for flag in ("--config", "--out", "--seed", "--exclude"):
        assert flag in decode_help
    for name in ("synth", "reversal"):
        text = sub[name].format_help()
        assert all(flag in text for flag in ("--config", "--out", "--seed"))


def test_unknown_flag_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--out", str(tmp_path), "--frobnicate"])
    assert exc.value.code == 2


def test_invalid_config_exits_validation(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"train": {"lr": -1}})
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    assert "lr" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


# --------------------------------------------------------------------------
# surrogate + decode

def test_surrogate_round_trip_and_seeds(tmp_path):
    spec = write_json(tmp_path / "spec.json", {"n_trials": 12, "n_neurons": 5, "seed": 3})
    assert main(["surrogate", str(spec), "--out", str(tmp_path / "a.ndjson")]) == 0
    assert main(["surrogate", str(spec), "--out", str(tmp_path / "b.ndjson"), "--seed", "4"]) == 0
    a = parse_spike_file(tmp_path / "a.ndjson")
    b = parse_spike_file(tmp_path / "b.ndjson")
    assert len(a.trials) == len(b.trials) == 24
    assert a.neuron_ids == b.neuron_ids
    assert (tmp_path / "a.ndjson").read_bytes() != (tmp_path / "b.ndjson").read_bytes()
    manifest = json.loads((tmp_path / "a.ndjson.manifest.json").read_text())
    assert manifest["seed"] == 3 and "a.ndjson" in manifest["artifacts"]


def test_surrogate_full_spec_form(tmp_path):
    spec = write_json(tmp_path / "spec.json", {"n_target": 3, "n_nontarget": 4,
                                               "rate_target": [5.0, 1.0], "rate_nontarget": [1.0, 5.0]})
    assert main(["surrogate", str(spec), "--out", str(tmp_path / "s.ndjson")]) == 0
    assert parse_spike_file(tmp_path / "s.ndjson").labels.count("nontarget") == 4


@pytest.mark.parametrize("doc", [{"n_trials": 0, "n_neurons": 3}, {"n_trials": 3}, {"what": 1},
                                 [1, 2]])
def test_invalid_surrogate_spec_is_usage_error(tmp_path, doc):
    spec = write_json(tmp_path / "spec.json", doc)
    assert main(["surrogate", str(spec), "--out", str(tmp_path / "s.ndjson")]) == 2
    assert not (tmp_path / "s.ndjson").exists()


@pytest.fixture
def spike_file(tmp_path):
    spec = write_json(tmp_path / "spec.json", {"n_trials": 30, "n_neurons": 8, "separation": 3.0,
                                               "seed": 1})
    main(["surrogate", str(spec), "--out", str(tmp_path / "s.ndjson")])
    return tmp_path / "s.ndjson"


def test_decode_outputs(tmp_path, spike_file):
    cfg = write_json(tmp_path / "c.json", SMALL)
    out = tmp_path / "dec"
    assert main(["decode", str(spike_file), "--config", str(cfg), "--out", str(out)]) == 0
    rows = read_csv(out / "decode.csv")
    summary = {r["row_type"]: float(r["value"]) for r in rows if r["trial_id"] == ""}
    assert summary["mean_accuracy"] > 0.95
    assert sum(r["row_type"] == "posterior" for r in rows) == 60
    assert json.loads((out / "baseline.json").read_text())["z"] < -2
    margin = json.loads((out / "margin.json").read_text())
    assert margin["margin"] > 0 and set(margin["percentiles"]) == {"1", "5"}
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["artifacts"]) == {"decode.csv", "rsa.json", "margin.json", "baseline.json",
                                          "preprocessing.json", "config.json"}


def test_excluded_session_writes_nothing(tmp_path, spike_file):
    out = tmp_path / "dec"
    session = parse_spike_file(spike_file).session_id
    assert main(["decode", str(spike_file), "--out", str(out), "--exclude", "other",
                 "--exclude", session]) == 5
    assert not out.exists()
    cfg = write_json(tmp_path / "c.json", {**SMALL, "analysis": {"exclude": [session]}})
    assert main(["decode", str(spike_file), "--config", str(cfg), "--out", str(out)]) == 5


def test_decode_parse_error_exit_code(tmp_path):
    (tmp_path / "bad.ndjson").write_text("{nope\n")
    assert main(["decode", str(tmp_path / "bad.ndjson"), "--out", str(tmp_path / "o")]) == 3


# --------------------------------------------------------------------------
# synth and reversal

def test_synth_small_config(tmp_path):
    cfg = write_json(tmp_path / "c.json", SMALL)
    out = tmp_path / "syn"
    assert main(["synth", "--config", str(cfg), "--out", str(out)]) == 0
    log = read_csv(out / "trainlog.csv")
    assert list(log[0]) == ["epoch", "train_loss", "train_acc", "probe_loss", "probe_acc_j1",
                            "probe_acc_j2", "margin", "fisher_j1", "fisher_j2"]
    margins = read_csv(out / "margins.csv")
    assert margins and float(margins[0]["normalized"]) == 1.0
    assert all(float(m["closest_1pct"]) <= float(m["closest_5pct"]) for m in margins)
    pcs = sorted(p.name for p in out.glob("pca_epoch*.csv"))
    assert "pca_epoch0.csv" in pcs and "pca_epoch150.csv" in pcs
    assert len(read_csv(out / "pca_epoch0.csv")) == 31
    echoed = ExperimentConfig.load(out / "config.json")
    assert echoed == ExperimentConfig.from_dict(SMALL)


def test_synth_bio_model_same_file_set(tmp_path):
    mlp = write_json(tmp_path / "m.json", SMALL)
    bio = write_json(tmp_path / "b.json", {**SMALL, "model": {"kind": "bio", "widths": [24, 8]}})
    assert main(["synth", "--config", str(mlp), "--out", str(tmp_path / "m")]) == 0
    assert main(["synth", "--config", str(bio), "--out", str(tmp_path / "b")]) == 0
    fixed = {"trainlog.csv", "margins.csv", "rsa.csv", "config.json", "manifest.json",
             "pca_epoch0.csv"}
    for run in ("m", "b"):
        assert fixed <= {p.name for p in (tmp_path / run).iterdir()}


def test_linear2_is_rejected_for_synth(tmp_path):
    cfg = write_json(tmp_path / "c.json", {**SMALL, "model": {"kind": "linear2", "widths": [10]}})
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


def test_reversal_single_T_gives_single_sweep_row(tmp_path):
    cfg = write_json(tmp_path / "c.json", {"reversal": {**SMALL["reversal"], "T_list": [0.5]}})
    out = tmp_path / "rev"
    assert main(["reversal", "--config", str(cfg), "--out", str(out)]) == 0
    assert len(read_csv(out / "sweep.csv")) == 1
    assert (out / "theory_phase2_T0.csv").exists() and not (out / "theory_phase2_T1.csv").exists()


def test_reversal_lazy_column_matches_theory(tmp_path):
    cfg = write_json(tmp_path / "c.json", {"reversal": {**SMALL["reversal"], "gamma0": 1e-3,
                                                        "T_list": [3.0], "dt": 1e-3}})
    out = tmp_path / "rev"
    assert main(["reversal", "--config", str(cfg), "--out", str(out)]) == 0
    for name, col in (("theory_phase1.csv", "f_y"), ("theory_phase2_T0.csv", "f_rev")):
        rows = read_csv(out / name)
        diff = [abs(float(r[col]) - float(r[col + "_lazy"])) for r in rows]
        assert max(diff) < 1e-3


def test_reversal_default_sweep_strictly_decreasing(tmp_path):
    cfg = write_json(tmp_path / "c.json", {"reversal": {"N": 40, "lr": 0.01}})
    out = tmp_path / "rev"
    assert main(["reversal", "--config", str(cfg), "--out", str(out)]) == 0
    times = [float(r["reversal_time"]) for r in read_csv(out / "sweep.csv")]
    assert len(times) == 5 and all(a > b for a, b in zip(times, times[1:]))
    kernel = read_csv(out / "kernel_alignment.csv")
    assert kernel[0]["step"] == "0"
    pcs = read_csv(out / "pcs.csv")
    assert {r["step"] for r in pcs} == {"0", "100", "200", "300", "400"}
    assert np.isfinite([float(r["pc1"]) for r in pcs]).all()
