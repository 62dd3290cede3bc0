import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from breathstage.signal_io import EPOCH_S, Channel, Sex, prepare
from breathstage.stages import Stage5, collapse_labels
from breathstage.synth import (
    BreathingConfig,
    CohortSpec,
    CohortSpecError,
    StageGenerator,
    TargetInfeasible,
    gen_cohort,
    gen_stage_sequence,
    inject_events,
    realized_ahi,
    synth_breathing,
    write_cohort,
)


def night(stage, hours):
    return np.full(int(hours * 3600 // EPOCH_S), int(stage))


def test_default_chain_is_irreducible():
    assert StageGenerator().is_irreducible()


def test_identity_chain_stays_awake():
    gen = StageGenerator(np.eye(5), np.array([1.0, 0, 0, 0, 0]))
    assert not gen.is_irreducible()
    assert np.all(gen_stage_sequence(gen, 200, np.random.default_rng(0)) == Stage5.WAKE)


def test_bad_transition_rows():
    with pytest.raises(ValueError):
        StageGenerator(np.full((5, 5), 0.3))


def test_stage_frequencies_match_stationary():
    gen = StageGenerator()
    rng = np.random.default_rng(11)
    counts = np.zeros(5)
    for _ in range(1500):
        counts += np.bincount(gen_stage_sequence(gen, 960, rng), minlength=5)
    freq = counts / counts.sum()
    assert np.max(np.abs(freq - gen.stationary())) < 0.02


def test_stage_sequence_deterministic():
    a = gen_stage_sequence(StageGenerator(), 500, np.random.default_rng(4))
    b = gen_stage_sequence(StageGenerator(), 500, np.random.default_rng(4))
    np.testing.assert_array_equal(a, b)


# --------------------------------------------------------------- breathing


def _peak_bpm(x, fs=10.0):
    spec = np.abs(np.fft.rfft(x - x.mean()))
    freqs = np.fft.rfftfreq(x.size, 1 / fs)
    return 60 * freqs[np.argmax(spec)]


def test_n3_spectral_peak():
    r = synth_breathing(night(Stage5.N3, 1), np.random.default_rng(0))
    assert r.sample_rate_hz == 10.0
    assert abs(_peak_bpm(r.samples) - 12.5) <= 0.5


def test_noiseless_peak_to_peak_constant():
    r = synth_breathing(night(Stage5.N2, 0.5), np.random.default_rng(0), BreathingConfig.noiseless())
    x = r.samples
    period = int(round(10 * 60 / 13.0 * 10))  # ten breaths at 13 bpm
    p2p = [x[i : i + period].max() - x[i : i + period].min() for i in range(0, x.size - period, period)]
    assert np.ptp(p2p) < 1e-3


@pytest.mark.parametrize("stage, bpm", [(Stage5.WAKE, 15.0), (Stage5.N2, 13.0), (Stage5.REM, 14.0)])
def test_rate_statistics_across_seeds(stage, bpm):
    peaks = [_peak_bpm(synth_breathing(night(stage, 1), np.random.default_rng(s)).samples) for s in (1, 2)]
    a, b = (synth_breathing(night(stage, 0.1), np.random.default_rng(s)).samples for s in (1, 2))
    assert not np.array_equal(a, b)
    for p in peaks:
        assert abs(p - bpm) < 1.5


# ------------------------------------------------------------------ events


def test_zero_target_leaves_record_alone():
    stages = night(Stage5.N2, 1)
    r = synth_breathing(stages, np.random.default_rng(0))
    out, events = inject_events(r, stages, 0.0, np.random.default_rng(1))
    assert events == [] and out is r


def test_target_30_on_6h_sleep():
    stages = night(Stage5.N2, 6)
    r = synth_breathing(stages, np.random.default_rng(0))
    _, events = inject_events(r, stages, 30.0, np.random.default_rng(2))
    assert abs(len(events) - 180) <= 9


def test_infeasible_target():
    stages = night(Stage5.N2, 0.5)
    r = synth_breathing(stages, np.random.default_rng(0))
    with pytest.raises(TargetInfeasible):
        inject_events(r, stages, 400.0, np.random.default_rng(0))


def _rms(x):
    return float(np.sqrt(np.mean(x**2)))


@given(st.integers(0, 10_000), st.floats(2.0, 50.0))
@settings(max_examples=15, deadline=None)
def test_events_disjoint_sorted_in_sleep(seed, target):
    rng = np.random.default_rng(seed)
    stages = gen_stage_sequence(StageGenerator(), 720, rng)
    r = synth_breathing(stages, rng, BreathingConfig(noise_sd=0.0))
    try:
        out, events = inject_events(r, stages, target, rng)
    except TargetInfeasible:
        return
    prev = -np.inf
    for e in events:
        assert e.end_s - e.start_s >= 10
        assert e.start_s - prev > 1
        prev = e.end_s
        epochs = stages[int(e.start_s // EPOCH_S) : int(np.ceil(e.end_s / EPOCH_S))]
        assert np.all(epochs != Stage5.WAKE)
        a, b = int(e.start_s * 10), int(e.end_s * 10)
        base = np.concatenate([r.samples[max(0, a - 300) : a], r.samples[b : b + 300]])
        assert _rms(out.samples[a:b]) < _rms(base)
        scale = 0.05 if e.kind == "apnea" else 0.7
        assert np.max(np.abs(out.samples[a:b])) <= scale * np.max(np.abs(r.samples[a:b])) + 1e-12


def test_realized_ahi_within_five_percent():
    spec = CohortSpec(n_subjects=10, seed=3, noise_sd=0.0)
    for s in gen_cohort(spec):
        if s.labels.tst_hours >= 6 and s.target_ahi >= 5:
            assert abs(realized_ahi(s.labels) - s.target_ahi) <= 0.05 * s.target_ahi


# ------------------------------------------------------------------ cohort


def test_all_female_spec():
    cohort = gen_cohort(CohortSpec(n_subjects=6, night_hours=0.5, female_prob=1.0))
    assert all(s.meta.sex == Sex.FEMALE for s in cohort)


def test_minority_count_binomial():
    spec = CohortSpec(n_subjects=200, night_hours=0.1)
    minority = sum(s.minority for s in gen_cohort(spec))
    assert 10 <= minority <= 32


def test_minority_noise_shifts_only_minority():
    base = gen_cohort(CohortSpec(n_subjects=30, night_hours=0.25, seed=1))
    shifted = gen_cohort(CohortSpec(n_subjects=30, night_hours=0.25, seed=1, minority_noise_sd=0.5))
    assert any(s.minority for s in base)
    for a, b in zip(base, shifted):
        assert np.array_equal(a.record.samples, b.record.samples) != a.minority


def test_multi_visit_ids():
    cohort = gen_cohort(CohortSpec(n_subjects=20, night_hours=0.1, multi_visit_prob=1.0))
    assert len(cohort) > 20
    for s in cohort:
        assert s.record_id.startswith(s.meta.subject_id + "_v")


@pytest.mark.parametrize(
    "changes, field",
    [
        ({"race_probs": {"Asian": 0.5, "Black": 0.2, "White": 0.5}}, "race_probs"),
        ({"female_prob": 1.5}, "female_prob"),
        ({"n_subjects": 0}, "n_subjects"),
        ({"noise_sd": -1.0}, "noise_sd"),
        ({"bogus": 1}, "bogus"),
    ],
)
def test_spec_errors_name_field(changes, field):
    with pytest.raises(CohortSpecError) as err:
        CohortSpec.from_dict(changes)
    assert err.value.field == field


def _tree_hash(path):
    h = hashlib.sha256()
    for p in sorted(path.iterdir()):
        h.update(p.name.encode() + p.read_bytes())
    return h.hexdigest()


def test_cohort_files_deterministic(tmp_path):
    spec = CohortSpec(n_subjects=4, night_hours=0.2, seed=9, channel_probs={"Radio": 1.0})
    write_cohort(gen_cohort(spec), tmp_path / "a", spec)
    write_cohort(gen_cohort(spec), tmp_path / "b", spec)
    assert _tree_hash(tmp_path / "a") == _tree_hash(tmp_path / "b")
    assert gen_cohort(spec)[0].record.channel == Channel.RADIO


# -------------------------------------------------------- separability


def _epoch_features(x):
    rows = []
    for e in x[: x.size // 300 * 300].reshape(-1, 300):
        ups = np.flatnonzero(np.diff(np.sign(e - np.median(e))) > 0)
        intervals = np.diff(ups) if ups.size > 2 else np.zeros(2)
        rows.append([ups.size, intervals.std(), e.std(), np.abs(e).max()])
    return np.array(rows)


def test_feature_classifier_separates_stages():
    from sklearn.ensemble import HistGradientBoostingClassifier

    cohort = gen_cohort(CohortSpec(n_subjects=12, seed=5))
    X = [_epoch_features(prepare(s.record).samples) for s in cohort]
    y = [collapse_labels(s.labels.stages) for s in cohort]
    clf = HistGradientBoostingClassifier(random_state=0).fit(np.vstack(X[:6]), np.concatenate(y[:6]))
    acc = np.mean(clf.predict(np.vstack(X[6:])) == np.concatenate(y[6:]))
    assert acc >= 0.70
