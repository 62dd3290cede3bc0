import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from breathstage.signal_io import (
    BadMagic,
    BreathingRecord,
    Channel,
    DegenerateSignal,
    EmptyFile,
    Event,
    LabelSet,
    MalformedRow,
    NoMatchingChannel,
    NonMonotonicTime,
    TooShort,
    TruncatedDataRecord,
    check_pipeline_entry,
    edf_decode,
    load_record,
    normalize,
    parse_csv_record,
    parse_edf_subset,
    read_events,
    read_manifest,
    read_stage_labels,
    resample,
    save_record,
    segment_epochs,
    write_edf,
    write_events,
    write_stage_labels,
)


def rec(samples, hz=10.0, channel=Channel.RADIO):
    return BreathingRecord("s1", channel, hz, np.asarray(samples, dtype=float))


def write_csv(path, rows, header="time_s,value"):
    path.write_text(header + "\n" + "".join(f"{a},{b}\n" for a, b in rows))


META = {"subject_id": "s1", "channel": "Radio", "sample_rate_hz": 10.0}


# ------------------------------------------------------------------- CSV


def test_csv_one_hour_at_10hz(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("time_s,value\n" + "".join(f"{i / 10},{np.sin(i / 7)}\n" for i in range(36000)))
    r = parse_csv_record(p, META)
    assert r.samples.size == 36000
    assert r.duration_s == 3600.0


def test_csv_32hz_duration(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("time_s,value\n" + "".join(f"{i / 32!r},0.5\n" for i in range(115200)))
    r = parse_csv_record(p, {**META, "sample_rate_hz": 32})
    assert r.duration_s == 3600.0


def test_csv_nan_is_malformed(tmp_path):
    p = tmp_path / "r.csv"
    write_csv(p, [(0, 1), (0.1, "NaN"), (0.2, 3)])
    with pytest.raises(MalformedRow) as err:
        parse_csv_record(p, META)
    assert err.value.line == 3


def test_csv_time_must_increase(tmp_path):
    p = tmp_path / "r.csv"
    write_csv(p, [(0, 1), (0.1, 2), (0.1, 3)])
    with pytest.raises(NonMonotonicTime):
        parse_csv_record(p, META)


@pytest.mark.parametrize("text", ["", "time_s,value\n"])
def test_csv_empty(tmp_path, text):
    p = tmp_path / "r.csv"
    p.write_text(text)
    with pytest.raises(EmptyFile):
        parse_csv_record(p, META)


def test_csv_bad_header(tmp_path):
    p = tmp_path / "r.csv"
    write_csv(p, [(0, 1)], header="t,v")
    with pytest.raises(MalformedRow):
        parse_csv_record(p, META)


def test_record_roundtrip_bitwise(tmp_path):
    x = np.random.default_rng(3).standard_normal(500)
    r = BreathingRecord("abc", Channel.THORAX, 25.0, x, start_epoch_unix_s=17)
    save_record(r, tmp_path / "abc.csv")
    back, side = load_record(tmp_path / "abc.csv")
    np.testing.assert_array_equal(back.samples, x)
    assert back.channel == Channel.THORAX and back.sample_rate_hz == 25.0
    assert side["start_epoch_unix_s"] == 17


def test_sidecar_is_sorted_json(tmp_path):
    save_record(rec(np.zeros(10)), tmp_path / "a.csv")
    text = (tmp_path / "a.json").read_text()
    assert list(json.loads(text)) == sorted(json.loads(text))


# ----------------------------------------------------------------- labels


def test_stage_labels_roundtrip(tmp_path):
    stages = np.array([0, 1, 2, 3, 4, 2, 0])
    write_stage_labels(stages, tmp_path / "s.csv")
    np.testing.assert_array_equal(read_stage_labels(tmp_path / "s.csv"), stages)


def test_stage_labels_out_of_sequence(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("epoch_index,stage\n0,W\n2,N1\n")
    with pytest.raises(MalformedRow):
        read_stage_labels(p)


def test_events_roundtrip(tmp_path):
    evs = [Event(10.0, 25.5, "apnea"), Event(40.0, 52.0, "hypopnea")]
    write_events(evs, tmp_path / "e.csv")
    assert read_events(tmp_path / "e.csv") == evs


def test_events_reject_reversed_interval(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("start_s,end_s,kind\n20,10,apnea\n")
    with pytest.raises(MalformedRow):
        read_events(p)


def test_labelset_rejects_overlap():
    labels = LabelSet(np.zeros(4), [Event(0, 20), Event(15, 40)])
    with pytest.raises(ValueError):
        labels.validate(120)


# -------------------------------------------------------------------- EDF


def _edf_bytes(label, digital, phys=(-1.0, 1.0), dig=(-32768, 32767)):
    """Hand-built single-signal EDF, one sample per data record."""
    head = (
        "0".ljust(8)
        + "P1 X X X".ljust(80)
        + "Startdate X".ljust(80)
        + "01.01.00"
        + "00.00.00"
        + "512".ljust(8)
        + "".ljust(44)
        + str(len(digital)).ljust(8)
        + "1".ljust(8)
        + "1".ljust(4)
    )
    head += label.ljust(16) + "".ljust(80) + "".ljust(8)
    head += str(phys[0]).ljust(8) + str(phys[1]).ljust(8) + str(dig[0]).ljust(8) + str(dig[1]).ljust(8)
    head += "".ljust(80) + "1".ljust(8) + "".ljust(32)
    assert len(head) == 512
    return head.encode("ascii") + np.asarray(digital, dtype="<i2").tobytes()


def test_edf_midpoint_and_endpoint(tmp_path):
    p = tmp_path / "a.edf"
    p.write_bytes(_edf_bytes("ABDO", [0, 32767, -32768]))
    (r,) = parse_edf_subset(p)
    assert r.channel == Channel.ABDOMEN
    half_lsb = 1.0 / 65535 * (1 + 1e-9)
    assert abs(r.samples[0]) <= half_lsb
    assert r.samples[1] == 1.0
    assert r.samples[2] == -1.0


def test_edf_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    dig = rng.integers(-32768, 32768, size=64)
    x = edf_decode(dig, -2.5, 3.5, -32768, 32767)
    thor = BreathingRecord("P1", Channel.THORAX, 8.0, x)
    abdo = BreathingRecord("P1", Channel.ABDOMEN, 4.0, x[:32])
    p = tmp_path / "b.edf"
    write_edf(p, [("THOR", thor), ("ABDO", abdo)], physical_range=(-2.5, 3.5), patient_id="P1")
    got = parse_edf_subset(p)
    assert [g.channel for g in got] == [Channel.THORAX, Channel.ABDOMEN]
    np.testing.assert_array_equal(got[0].samples, x)
    np.testing.assert_array_equal(got[1].samples, x[:32])
    assert got[0].sample_rate_hz == 8.0 and got[0].subject_id == "P1"


def test_edf_skips_annotations_and_unmatched(tmp_path):
    x = np.linspace(-1, 1, 20)
    p = tmp_path / "c.edf"
    write_edf(p, [("EEG C3", rec(x, 10)), ("EDF Annotations", rec(x, 10))])
    with pytest.raises(NoMatchingChannel):
        parse_edf_subset(p)
    assert parse_edf_subset(p, aliases={"EEG": Channel.RADIO})[0].channel == Channel.RADIO


def test_edf_bad_magic(tmp_path):
    p = tmp_path / "d.edf"
    p.write_bytes(b"X" + _edf_bytes("ABDO", [0])[1:])
    with pytest.raises(BadMagic):
        parse_edf_subset(p)


def test_edf_truncated(tmp_path):
    p = tmp_path / "e.edf"
    p.write_bytes(_edf_bytes("ABDO", [0, 1, 2, 3])[:-3])
    with pytest.raises(TruncatedDataRecord):
        parse_edf_subset(p)


# ------------------------------------------------------------ conditioning


def test_resample_identity_at_target():
    r = rec(np.arange(30.0))
    np.testing.assert_array_equal(resample(r, 10).samples, r.samples)


@given(st.floats(-100, 100), st.sampled_from([4.0, 12.5, 25.0, 32.0, 100.0]))
@settings(max_examples=40, deadline=None)
def test_resample_constant(c, hz):
    out = resample(rec(np.full(int(hz * 7), c), hz), 10)
    np.testing.assert_allclose(out.samples, c, rtol=0, atol=1e-12 * max(1, abs(c)))


def test_resample_ramp_32hz():
    t = np.arange(320) / 32
    out = resample(rec(t / 10, 32), 10)
    assert out.sample_rate_hz == 10 and out.samples.size == 100
    assert np.max(np.abs(out.samples - np.arange(100) / 100)) < 1e-12


def test_normalize_quartiles():
    np.testing.assert_allclose(normalize(rec([1, 2, 3, 4, 5])).samples, [-1, -0.5, 0, 0.5, 1])


def test_normalize_constant_flags():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        out = normalize(rec(np.full(50, 7.3)))
    assert np.all(out.samples == 0)
    assert "degenerate_signal" in out.flags
    assert any(issubclass(w.category, DegenerateSignal) for w in caught)


@given(st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_normalize_idempotent(seed):
    x = np.random.default_rng(seed).standard_normal(101)
    once = normalize(rec(x))
    twice = normalize(once)
    np.testing.assert_allclose(twice.samples, once.samples, atol=1e-12)


@pytest.mark.parametrize("n, epochs", [(3000, 10), (3050, 10), (300, 1)])
def test_segment_counts(n, epochs):
    x = np.arange(n, dtype=float)
    seg = segment_epochs(rec(x))
    assert seg.shape == (epochs, 300)
    np.testing.assert_array_equal(seg.ravel(), x[: epochs * 300])


def test_segment_too_short():
    with pytest.raises(TooShort):
        segment_epochs(rec(np.zeros(299)))


def test_pipeline_entry_needs_an_hour():
    check_pipeline_entry(rec(np.zeros(36000)))
    with pytest.raises(TooShort):
        check_pipeline_entry(rec(np.zeros(35990)))


# --------------------------------------------------------------- manifest


def test_manifest_relative_paths(tmp_path):
    (tmp_path / "m.csv").write_text("record_id,subject_id,record,stages,events,meta\nr1,s1,r1.csv,r1_stages.csv,,r1.json\n")
    (e,) = read_manifest(tmp_path / "m.csv")
    assert e.record == tmp_path / "r1.csv"
    assert e.events is None and e.stages == tmp_path / "r1_stages.csv"


def test_manifest_empty(tmp_path):
    (tmp_path / "m.csv").write_text("record_id,subject_id,record\n")
    with pytest.raises(EmptyFile):
        read_manifest(tmp_path / "m.csv")
