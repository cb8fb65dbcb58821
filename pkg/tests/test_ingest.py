import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from overtrain.errors import EmptyMatrixError, InvalidParameterError, ParseError, ValidationError
from overtrain.ingest import (CountMatrix, SpikeSession, SpikeTrial, SurrogateSpec,
                              drop_unresponsive, parse_spike_file, smooth_series,
                              surrogate_session, window_counts, write_spike_file)
from overtrain.popanalysis import kfold_decode, zscore


def session(spikes_per_trial, labels=None):
    labels = labels or ["target", "nontarget"] * (len(spikes_per_trial) // 2)
    return SpikeSession("s1", "m1", tuple(SpikeTrial(i, lab, sp) for i, (lab, sp) in
                                          enumerate(zip(labels, spikes_per_trial))))


def write_lines(path, docs):
    path.write_text("\n".join(d if isinstance(d, str) else json.dumps(d) for d in docs) + "\n")
    return path


def trial_doc(trial=0, **kw):
    doc = {"session": "s1", "subject": "m1", "trial": trial, "label": "target",
           "spikes_ms": {"a": [1.0, 2.0], "b": []}}
    doc.update(kw)
    return doc


# --------------------------------------------------------------------------
# parsing

def test_round_trip(tmp_path):
    s = surrogate_session(SurrogateSpec.simple(3, 4, seed=1))
    write_spike_file(s, tmp_path / "s.ndjson")
    assert parse_spike_file(tmp_path / "s.ndjson") == s
    assert (tmp_path / "s.ndjson").read_bytes().endswith(b"\n")
    assert b"\r" not in (tmp_path / "s.ndjson").read_bytes()


def test_empty_trial_list(tmp_path):
    with pytest.raises(ValidationError):
        parse_spike_file(write_lines(tmp_path / "e.ndjson", []))
    with pytest.raises(ValidationError):
        SpikeSession("s", "m", ())


def test_spike_beyond_window_names_bound(tmp_path):
    p = write_lines(tmp_path / "x.ndjson", [trial_doc(spikes_ms={"a": [2600.0], "b": []})])
    with pytest.raises(ValidationError, match="2500"):
        parse_spike_file(p)


def test_malformed_line_reports_line_number(tmp_path):
    p = write_lines(tmp_path / "x.ndjson", [trial_doc(0), "{not json", trial_doc(2)])
    with pytest.raises(ParseError) as exc:
        parse_spike_file(p)
    assert exc.value.line == 2 and "line 2" in str(exc.value)


def test_schema_violations(tmp_path):
    bad = [trial_doc(label="maybe"), trial_doc(trial="0"), trial_doc(extra=1),
           {"session": "s1"}, trial_doc(spikes_ms={"a": ["x"], "b": []})]
    for doc in bad:
        with pytest.raises(ValidationError):
            parse_spike_file(write_lines(tmp_path / "x.ndjson", [doc]))


def test_unsorted_spikes(tmp_path):
    p = write_lines(tmp_path / "x.ndjson", [trial_doc(spikes_ms={"a": [5.0, 1.0], "b": []})])
    with pytest.raises(ValidationError, match="sorted"):
        parse_spike_file(p)


def test_neuron_ids_must_agree(tmp_path):
    p = write_lines(tmp_path / "x.ndjson", [trial_doc(0), trial_doc(1, spikes_ms={"a": []})])
    with pytest.raises(ValidationError):
        parse_spike_file(p)


def test_mixed_sessions_rejected(tmp_path):
    p = write_lines(tmp_path / "x.ndjson", [trial_doc(0), trial_doc(1, session="s2")])
    with pytest.raises(ValidationError, match="line 2"):
        parse_spike_file(p)


# --------------------------------------------------------------------------
# counting

def test_window_counts_half_open():
    s = session([{"n": (100.0, 2100.0, 2499.0)}, {"n": (2000.0, 2500.0)}])
    c = window_counts(s)
    assert c.counts[:, 0].tolist() == [2, 1]
    assert window_counts(s, (0, 2500)).counts[:, 0].tolist() == [3, 1]


def test_window_counts_invalid():
    s = session([{"n": ()}, {"n": ()}])
    for w in [(2500, 2000), (100, 100), (-1, 10), (0, 2600)]:
        with pytest.raises(InvalidParameterError):
            window_counts(s, w)


def test_drop_unresponsive_boundary():
    c = CountMatrix(np.array([[1, 2, 5], [2, 2, 0]]), (0, 1), ["n3", "n4", "n5"], ["target", "nontarget"])
    kept, dropped = drop_unresponsive(c)
    assert dropped == ["n3"] and kept.neuron_ids == ["n4", "n5"]
    assert kept.counts.shape[0] == c.counts.shape[0]


def test_drop_unresponsive_identity_and_empty():
    c = CountMatrix(np.full((3, 2), 4), (0, 1), ["a", "b"], ["target"] * 3)
    kept, dropped = drop_unresponsive(c)
    assert dropped == [] and np.array_equal(kept.counts, c.counts)
    with pytest.raises(EmptyMatrixError):
        drop_unresponsive(CountMatrix(np.zeros((3, 2), int), (0, 1), ["a", "b"], ["target"] * 3))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.integers(0, 6), min_size=3, max_size=3), min_size=1, max_size=6))
def test_drop_rule_property(rows):
    counts = np.array(rows)
    c = CountMatrix(counts, (0, 1), ["a", "b", "c"], ["target"] * len(rows))
    if (counts.sum(0) < 4).all():
        with pytest.raises(EmptyMatrixError):
            drop_unresponsive(c)
        return
    kept, dropped = drop_unresponsive(c)
    assert kept.counts.shape[0] == len(rows)
    assert all(counts[:, "abc".index(n)].sum() < 4 for n in dropped)
    assert (kept.counts.sum(0) >= 4).all()


# --------------------------------------------------------------------------
# surrogates

def test_surrogate_poisson_mean():
    spec = SurrogateSpec(5000, 5000, (8.0, 2.0), (8.0, 2.0), seed=0)
    totals = window_counts(surrogate_session(spec), (0, 2500)).counts.sum(0)
    expected = np.array([8.0, 2.0]) * 2.5 * 10_000
    assert np.all(np.abs(totals / expected - 1) < 0.05)


def test_surrogate_structure_and_sorting():
    spec = SurrogateSpec.simple(4, 3, seed=2)
    s = surrogate_session(spec)
    assert s.labels == ["target"] * 4 + ["nontarget"] * 4
    for t in s.trials:
        for times in t.spikes.values():
            assert list(times) == sorted(times) and all(0 <= x < 2500 for x in times)


def test_surrogate_separation_scaling():
    spec = SurrogateSpec(1, 1, (10.0, 4.0), (4.0, 10.0), separation=0.0)
    t, n = spec.class_rates()
    assert np.allclose(t, n)
    t, n = SurrogateSpec(1, 1, (10.0,), (4.0,), separation=2.0).class_rates()
    assert np.allclose(t - n, 12.0)
    with pytest.raises(InvalidParameterError):
        SurrogateSpec(1, 1, (1.0,), (1.0,), separation=-1)


def test_surrogate_chance_and_signal_decoding():
    def accuracy(sep, seed):
        s = surrogate_session(SurrogateSpec.simple(60, 12, rate_gap=4.0, separation=sep, seed=seed))
        c, _ = drop_unresponsive(window_counts(s))
        return kfold_decode(zscore(c.counts, c.labels), iterations=5, rng=seed).mean_accuracy

    assert abs(accuracy(0.0, 1) - 0.5) < 3 * np.sqrt(0.25 / 120)
    assert accuracy(5.0, 1) > 0.95


def test_surrogate_spec_json_round_trip():
    spec = SurrogateSpec.simple(2, 3, seed=5)
    assert SurrogateSpec.from_json(spec.to_json()) == spec
    with pytest.raises(ValidationError):
        SurrogateSpec.from_json({**spec.to_json(), "bogus": 1})


# --------------------------------------------------------------------------
# smoothing

def test_smooth_identity_window_one():
    x = np.array([3.0, 1.0, 4.0, 1.0, 5.0])
    m, se = smooth_series(x, 1)
    assert np.array_equal(m, x) and np.all(se == 0)


def test_smooth_constant_series():
    m, se = smooth_series(np.full(9, 0.1), 4)
    assert np.allclose(m, 0.1) and np.all(se == 0)


def test_smooth_linear_ramp_interior_exact():
    x = 2.0 * np.arange(20) + 1
    m, _ = smooth_series(x, 5)
    assert np.allclose(m[2:-2], x[2:-2])
    assert np.isclose(m[0], x[:3].mean())


def test_smooth_standard_error_and_stride():
    x = np.array([0.0, 2.0, 4.0, 6.0])
    m, se = smooth_series(x, 3, stride=2)
    assert m.tolist() == [1.0, 4.0]
    assert np.isclose(se[0], np.std([0.0, 2.0], ddof=1) / np.sqrt(2))
    with pytest.raises(InvalidParameterError):
        smooth_series(x, 0)


def test_pipeline_is_deterministic(tmp_path):
    write_spike_file(surrogate_session(SurrogateSpec.simple(20, 6, seed=3)), tmp_path / "s.ndjson")
    runs = []
    for _ in range(2):
        c, _ = drop_unresponsive(window_counts(parse_spike_file(tmp_path / "s.ndjson")))
        runs.append(kfold_decode(zscore(c.counts, c.labels), iterations=3, rng=4).accuracies)
    assert np.array_equal(*runs)
