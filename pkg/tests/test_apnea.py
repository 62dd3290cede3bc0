import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from breathstage.apnea import (
    ApneaModel,
    ApneaModelConfig,
    RespiratoryEvent,
    Severity,
    ZeroSleepTime,
    compute_ahi,
    event_targets,
    postprocess,
    postprocess_intervals,
    score_events,
    write_event_csv,
)
from breathstage.signal_io import BreathingRecord, Channel, Event, TooShort
from breathstage.staging import BadConfig
from gradcheck import numeric_grad, rel_error


def reference_postprocess(probs, threshold=0.5, cell=1.0):
    """Boolean-mask version: fill short gaps between runs, then drop short runs."""
    on = np.asarray(probs) >= threshold
    n = on.size
    filled = on.copy()
    idx = np.flatnonzero(on)
    if idx.size:
        for a, b in zip(idx[:-1], idx[1:]):
            if 1 < b - a and (b - a - 1) * cell <= 1.0:
                filled[a + 1 : b] = True
    events = []
    i = 0
    while i < n:
        if filled[i]:
            j = i
            while j < n and filled[j]:
                j += 1
            if (j - i) * cell >= 10.0:
                events.append(RespiratoryEvent(i * cell, j * cell))
            i = j
        else:
            i += 1
    return events


def _series(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 400))
    # runs of on/off with lengths around the merge and duration thresholds
    vals, on = [], bool(rng.integers(2))
    while len(vals) < n:
        length = int(rng.choice([1, 1, 2, 3, 5, 9, 10, 11, 15]))
        vals.extend([rng.uniform(0.5, 1) if on else rng.uniform(0, 0.5)] * length)
        on = not on
    return np.array(vals[:n])


def test_postprocess_matches_reference_on_1000_series():
    for seed in range(1000):
        p = _series(seed)
        assert postprocess(p) == reference_postprocess(p), seed


def test_merge_before_drop():
    # 6 s and 6.5 s runs separated by 0.5 s
    assert postprocess_intervals([(100.0, 106.0), (106.5, 113.0)]) == [RespiratoryEvent(100.0, 113.0)]


def test_half_second_grid_matches_reference():
    rng = np.random.default_rng(0)
    for _ in range(200):
        on = rng.random(300) < 0.7
        cells = np.flatnonzero(np.diff(np.concatenate([[0], on.astype(int), [0]])))
        runs = [(a / 2, b / 2) for a, b in zip(cells[::2], cells[1::2])]
        assert postprocess_intervals(runs) == reference_postprocess(on.astype(float), cell=0.5)


def test_gap_of_exactly_one_second_merges():
    p = np.r_[np.ones(6), 0, np.ones(6)]
    assert postprocess(p) == [RespiratoryEvent(0.0, 13.0)]
    p = np.r_[np.ones(6), 0, 0, np.ones(6)]
    assert postprocess(p) == []


def test_threshold_bounds():
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            postprocess([0.5] * 20, bad)


@given(st.lists(st.floats(0, 1), max_size=300), st.floats(0.05, 0.95))
@settings(max_examples=200, deadline=None)
def test_events_well_formed(probs, thr):
    events = postprocess(probs, thr)
    for a, b in zip(events, events[1:]):
        assert b.start_s - a.end_s > 1.0
    assert all(e.duration_s >= 10 for e in events)
    assert events == reference_postprocess(probs, thr)


# -------------------------------------------------------------------- AHI


@pytest.mark.parametrize(
    "ahi, severity",
    [(0, "Normal"), (5, "Normal"), (5.0001, "Mild"), (15, "Mild"), (15.01, "Moderate"), (30, "Moderate"), (30.5, "Severe")],
)
def test_severity_boundaries(ahi, severity):
    assert Severity.from_ahi(ahi).value == severity


def test_ahi_counts_per_hour():
    rep = compute_ahi([RespiratoryEvent(i * 60.0, i * 60.0 + 12) for i in range(30)], 6.0, "s1")
    assert rep.ahi == 5.0 and rep.severity == Severity.NORMAL
    assert rep.csv_line() == "s1,5.0,Normal,30,6.0"


def test_zero_sleep_time():
    with pytest.raises(ZeroSleepTime):
        compute_ahi([], 0.0)


def test_oracle_probabilities_recover_events():
    events = [Event(30.0, 45.0), Event(100.0, 160.0), Event(163.0, 180.0)]
    probs = event_targets(events, 600)
    got = postprocess(probs)
    assert [(e.start_s, e.end_s) for e in got] == [(30.0, 45.0), (100.0, 160.0), (163.0, 180.0)]


def test_event_csv(tmp_path):
    write_event_csv([RespiratoryEvent(1.0, 12.5)], tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == "start_s,end_s\n1.0,12.5\n"


# ------------------------------------------------------------------ model


def test_model_shapes_and_range():
    m = ApneaModel.create(seed=0)
    rec = BreathingRecord("s", Channel.RADIO, 10.0, np.random.default_rng(0).standard_normal(6005))
    p = score_events(m, rec)
    assert p.shape == (600,)
    assert np.all((p > 0) & (p < 1))


def test_model_too_short():
    rec = BreathingRecord("s", Channel.RADIO, 10.0, np.zeros(590))
    with pytest.raises(TooShort):
        score_events(ApneaModel.create(), rec)


def test_model_stride_product_checked():
    with pytest.raises(BadConfig):
        ApneaModel.create(ApneaModelConfig(strides=(2, 1, 2, 1, 1, 1, 1)))


def test_model_gradient():
    cfg = ApneaModelConfig(channels=(3, 3, 4, 4, 2, 2, 1), kernel=5)
    rng = np.random.default_rng(1)
    m = ApneaModel.create(cfg, seed=4)
    for path in m.params.paths():
        if path.endswith(".b"):
            m.params[path][...] += 0.1 * rng.standard_normal(m.params[path].shape)
    x = rng.standard_normal((2, 200))
    r = rng.standard_normal((2, 20))
    m.params.zero_grad()
    logits, caches = m.forward(x)
    m.backward(r, caches)
    for path in m.params.paths():
        num = numeric_grad(lambda: float(np.sum(m.forward(x)[0] * r)), m.params[path], h=1e-6)
        assert rel_error(m.params.grads[path], num) < 1e-6, path


def test_checkpoint_roundtrip(tmp_path):
    m = ApneaModel.create(seed=2)
    m.save(tmp_path / "a.ckpt")
    back = ApneaModel.load(tmp_path / "a.ckpt")
    assert back.params.checksum() == m.params.checksum()
    assert back.config == m.config
