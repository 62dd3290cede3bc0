"""Reading, writing and conditioning of nocturnal breathing signals.

Records are held at their native rate on disk (CSV + JSON sidecar, or EDF)
and brought to the canonical 10 Hz, robust-normalized form before any model
sees them.
"""

from __future__ import annotations

import csv
import json
import math
import os
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from breathstage.stages import Stage5

CANONICAL_HZ = 10.0
EPOCH_S = 30
EPOCH_SAMPLES = 300
MIN_PIPELINE_S = 3600.0


class SignalIOError(ValueError):
    pass


class MalformedRow(SignalIOError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


class NonMonotonicTime(SignalIOError):
    def __init__(self, line: int):
        super().__init__(f"line {line}: time does not increase")
        self.line = line


class EmptyFile(SignalIOError):
    pass


class BadMagic(SignalIOError):
    pass


class TruncatedDataRecord(SignalIOError):
    pass


class NoMatchingChannel(SignalIOError):
    pass


class TooShort(SignalIOError):
    pass


class DegenerateSignal(UserWarning):
    """Raised as a warning when a signal has zero interquartile range."""


class Channel(str, Enum):
    RADIO = "Radio"
    THORAX = "ThoraxBelt"
    ABDOMEN = "AbdomenBelt"


class Sex(IntEnum):
    FEMALE = 0
    MALE = 1


class Race(str, Enum):
    ASIAN = "Asian"
    BLACK = "Black"
    WHITE = "White"
    OTHERS = "Others"


@dataclass(frozen=True, eq=False)
class BreathingRecord:
    subject_id: str
    channel: Channel
    sample_rate_hz: float
    samples: np.ndarray
    start_epoch_unix_s: int = 0
    flags: frozenset = frozenset()

    def __post_init__(self):
        samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        if not self.sample_rate_hz > 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if samples.size == 0:
            raise ValueError("samples must be nonempty")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "channel", Channel(self.channel))

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def with_samples(self, samples, sample_rate_hz: float | None = None, flags=None) -> "BreathingRecord":
        return replace(
            self,
            samples=samples,
            sample_rate_hz=self.sample_rate_hz if sample_rate_hz is None else sample_rate_hz,
            flags=self.flags if flags is None else frozenset(flags),
        )


@dataclass(frozen=True)
class SubjectMeta:
    subject_id: str
    age_years: float
    sex: Sex
    race: Race
    comorbidities: frozenset = frozenset()
    medications: frozenset = frozenset()

    def __post_init__(self):
        if not 0 <= self.age_years < 130:
            raise ValueError(f"age_years out of range: {self.age_years}")
        object.__setattr__(self, "sex", Sex(self.sex))
        object.__setattr__(self, "race", Race(self.race))
        object.__setattr__(self, "comorbidities", frozenset(self.comorbidities))
        object.__setattr__(self, "medications", frozenset(self.medications))


@dataclass(frozen=True)
class Event:
    start_s: float
    end_s: float
    kind: str = "apnea"

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


@dataclass
class LabelSet:
    stages: np.ndarray  # Stage5 codes per 30 s epoch
    events: list[Event] = field(default_factory=list)

    def __post_init__(self):
        self.stages = np.asarray(self.stages, dtype=np.int64)
        self.events = sorted(self.events, key=lambda e: (e.start_s, e.end_s))

    def validate(self, duration_s: float) -> None:
        if self.stages.size != int(duration_s // EPOCH_S):
            raise ValueError(f"{self.stages.size} stages for a {duration_s} s record")
        prev_end = -math.inf
        for ev in self.events:
            if not 0 <= ev.start_s < ev.end_s <= duration_s:
                raise ValueError(f"event {ev} outside record")
            if ev.start_s < prev_end:
                raise ValueError(f"event {ev} overlaps its predecessor")
            prev_end = ev.end_s

    @property
    def sleep_epochs(self) -> int:
        return int(np.count_nonzero(self.stages != Stage5.WAKE))

    @property
    def tst_hours(self) -> float:
        return self.sleep_epochs * EPOCH_S / 3600.0


# ---------------------------------------------------------------- sidecar / CSV


def meta_to_sidecar(record: BreathingRecord, meta: SubjectMeta | None = None) -> dict:
    out = {
        "subject_id": record.subject_id,
        "channel": record.channel.value,
        "sample_rate_hz": record.sample_rate_hz,
        "start_epoch_unix_s": int(record.start_epoch_unix_s),
    }
    if meta is not None:
        out.update(
            age=meta.age_years,
            sex=int(meta.sex),
            race=meta.race.value,
            comorbidities=sorted(meta.comorbidities),
            medications=sorted(meta.medications),
        )
    return out


def read_sidecar(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    for key in ("subject_id", "channel", "sample_rate_hz"):
        if key not in data:
            raise SignalIOError(f"{path}: sidecar missing {key!r}")
    return data


def sidecar_subject_meta(side: dict) -> SubjectMeta:
    return SubjectMeta(
        subject_id=str(side["subject_id"]),
        age_years=float(side["age"]),
        sex=Sex(int(side["sex"])),
        race=Race(side["race"]),
        comorbidities=frozenset(side.get("comorbidities", ())),
        medications=frozenset(side.get("medications", ())),
    )


def write_json_atomic(path, data) -> None:
    _write_atomic(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def _write_atomic(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def parse_csv_record(path, meta: dict) -> BreathingRecord:
    """Read a ``time_s,value`` CSV; the sample rate comes from ``meta`` (sidecar dict)."""
    times: list[float] = []
    values: list[float] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyFile(f"{path}: empty file")
        if [h.strip() for h in header] != ["time_s", "value"]:
            raise MalformedRow(1, f"expected header 'time_s,value', got {header!r}")
        prev = -math.inf
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise MalformedRow(lineno, f"expected 2 columns, got {len(row)}")
            try:
                t = float(row[0])
                v = float(row[1])
            except ValueError:
                raise MalformedRow(lineno, f"unparseable row {row!r}") from None
            if not (math.isfinite(t) and math.isfinite(v)):
                raise MalformedRow(lineno, "non-finite value")
            if t <= prev:
                raise NonMonotonicTime(lineno)
            prev = t
            times.append(t)
            values.append(v)
    if not values:
        raise EmptyFile(f"{path}: no samples")
    return BreathingRecord(
        subject_id=str(meta["subject_id"]),
        channel=Channel(meta["channel"]),
        sample_rate_hz=float(meta["sample_rate_hz"]),
        samples=np.array(values),
        start_epoch_unix_s=int(meta.get("start_epoch_unix_s", 0)),
    )


def write_csv_record(record: BreathingRecord, path) -> None:
    rate = record.sample_rate_hz
    lines = ["time_s,value"]
    lines.extend(f"{i / rate!r},{v!r}" for i, v in enumerate(record.samples.tolist()))
    _write_atomic(path, "\n".join(lines) + "\n")


def load_record(csv_path) -> tuple[BreathingRecord, dict]:
    """Load a record plus its sidecar (``<stem>.json`` next to the CSV)."""
    csv_path = Path(csv_path)
    side = read_sidecar(csv_path.with_suffix(".json"))
    return parse_csv_record(csv_path, side), side


def save_record(record: BreathingRecord, csv_path, meta: SubjectMeta | None = None) -> None:
    csv_path = Path(csv_path)
    write_csv_record(record, csv_path)
    write_json_atomic(csv_path.with_suffix(".json"), meta_to_sidecar(record, meta))


def read_stage_labels(path) -> np.ndarray:
    stages = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyFile(f"{path}: empty file")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                idx = int(row[0])
                stage = Stage5.from_code(row[1])
            except (ValueError, IndexError):
                raise MalformedRow(lineno, f"bad stage row {row!r}") from None
            if idx != len(stages):
                raise MalformedRow(lineno, f"epoch index {idx} out of sequence")
            stages.append(int(stage))
    return np.array(stages, dtype=np.int64)


def write_stage_labels(stages, path) -> None:
    lines = ["epoch_index,stage"]
    lines.extend(f"{i},{Stage5(s).code}" for i, s in enumerate(np.asarray(stages).tolist()))
    _write_atomic(path, "\n".join(lines) + "\n")


def read_events(path) -> list[Event]:
    events = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyFile(f"{path}: empty file")
        has_kind = len(header) >= 3
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                start, end = float(row[0]), float(row[1])
                kind = row[2].strip().lower() if has_kind else "apnea"
            except (ValueError, IndexError):
                raise MalformedRow(lineno, f"bad event row {row!r}") from None
            if kind not in ("apnea", "hypopnea") or not start < end:
                raise MalformedRow(lineno, f"bad event row {row!r}")
            events.append(Event(start, end, kind))
    return events


def write_events(events: Iterable[Event], path, with_kind: bool = True) -> None:
    lines = ["start_s,end_s,kind" if with_kind else "start_s,end_s"]
    for ev in events:
        row = f"{ev.start_s!r},{ev.end_s!r}"
        lines.append(f"{row},{ev.kind}" if with_kind else row)
    _write_atomic(path, "\n".join(lines) + "\n")


def load_labels(stages_path, events_path=None) -> LabelSet:
    events = read_events(events_path) if events_path is not None else []
    return LabelSet(read_stage_labels(stages_path), events)


# ---------------------------------------------------------------------- EDF

DEFAULT_CHANNEL_ALIASES = {"THOR": Channel.THORAX, "ABDO": Channel.ABDOMEN}


@dataclass
class EdfSignalHeader:
    label: str
    physical_min: float
    physical_max: float
    digital_min: int
    digital_max: int
    samples_per_record: int


@dataclass
class EdfHeader:
    patient_id: str
    recording_id: str
    header_bytes: int
    n_records: int
    record_duration_s: float
    signals: list[EdfSignalHeader]


def _field(raw: bytes, what: str) -> str:
    try:
        return raw.decode("ascii").strip()
    except UnicodeDecodeError:
        raise BadMagic(f"non-ASCII header field {what}") from None


def read_edf_header(fh) -> EdfHeader:
    fixed = fh.read(256)
    if len(fixed) < 256 or fixed[:8] != b"0       ":
        raise BadMagic("not an EDF file (version field must be '0')")
    try:
        header_bytes = int(_field(fixed[184:192], "header bytes"))
        n_records = int(_field(fixed[236:244], "number of records"))
        duration = float(_field(fixed[244:252], "record duration"))
        ns = int(_field(fixed[252:256], "number of signals"))
    except ValueError as exc:
        raise BadMagic(f"unparseable EDF header: {exc}") from None
    if header_bytes != 256 * (ns + 1):
        raise BadMagic(f"header size {header_bytes} inconsistent with {ns} signals")
    block = fh.read(256 * ns)
    if len(block) < 256 * ns:
        raise BadMagic("truncated signal headers")

    def column(offset: int, width: int) -> list[str]:
        start = offset * ns
        return [_field(block[start + i * width : start + (i + 1) * width], "signal") for i in range(ns)]

    labels = column(0, 16)
    pmin = column(16 + 80 + 8, 8)
    pmax = column(16 + 80 + 16, 8)
    dmin = column(16 + 80 + 24, 8)
    dmax = column(16 + 80 + 32, 8)
    nsamp = column(16 + 80 + 40 + 80, 8)
    try:
        signals = [
            EdfSignalHeader(labels[i], float(pmin[i]), float(pmax[i]), int(dmin[i]), int(dmax[i]), int(nsamp[i]))
            for i in range(ns)
        ]
    except ValueError as exc:
        raise BadMagic(f"unparseable signal header: {exc}") from None
    return EdfHeader(
        patient_id=_field(fixed[8:88], "patient"),
        recording_id=_field(fixed[88:168], "recording"),
        header_bytes=header_bytes,
        n_records=n_records,
        record_duration_s=duration,
        signals=signals,
    )


def edf_decode(digital, physical_min, physical_max, digital_min, digital_max) -> np.ndarray:
    """Linear digital -> physical map, evaluated in extended precision."""
    d = np.asarray(digital, dtype=np.longdouble)
    pmin = np.longdouble(physical_min)
    gain = (np.longdouble(physical_max) - pmin) / (np.longdouble(digital_max) - np.longdouble(digital_min))
    return (pmin + (d - np.longdouble(digital_min)) * gain).astype(np.float64)


def edf_encode(physical, physical_min, physical_max, digital_min, digital_max) -> np.ndarray:
    p = np.asarray(physical, dtype=np.longdouble)
    pmin = np.longdouble(physical_min)
    scale = (np.longdouble(digital_max) - np.longdouble(digital_min)) / (np.longdouble(physical_max) - pmin)
    d = np.rint((p - pmin) * scale + np.longdouble(digital_min))
    return np.clip(d, digital_min, digital_max).astype(np.int16)


def _match_channel(label: str, aliases: dict) -> Channel | None:
    upper = label.upper()
    for key, channel in aliases.items():
        if key.upper() in upper:
            return Channel(channel)
    return None


def parse_edf_subset(path, aliases: dict | None = None) -> list[BreathingRecord]:
    """Extract breathing-belt channels from an EDF/EDF+ file.

    Channels are selected when their label contains one of the ``aliases`` keys
    (default ``THOR`` and ``ABDO``, case-insensitive). Annotation channels are
    never decoded.
    """
    aliases = {**DEFAULT_CHANNEL_ALIASES, **(aliases or {})}
    path = Path(path)
    with open(path, "rb") as fh:
        header = read_edf_header(fh)
        payload = fh.read()
    spr = [s.samples_per_record for s in header.signals]
    record_len = sum(spr)
    n_records = header.n_records
    if n_records < 0:
        n_records = len(payload) // (2 * record_len)
    if len(payload) < 2 * record_len * n_records or n_records == 0:
        raise TruncatedDataRecord(
            f"{path}: expected {n_records} records of {2 * record_len} bytes, got {len(payload)} bytes"
        )
    data = np.frombuffer(payload, dtype="<i2", count=record_len * n_records).reshape(n_records, record_len)
    offsets = np.concatenate([[0], np.cumsum(spr)])
    subject = header.patient_id.split(" ")[0] or path.stem
    out = []
    for i, sig in enumerate(header.signals):
        if "ANNOTATION" in sig.label.upper():
            continue
        channel = _match_channel(sig.label, aliases)
        if channel is None:
            continue
        digital = data[:, offsets[i] : offsets[i + 1]].reshape(-1)
        physical = edf_decode(digital, sig.physical_min, sig.physical_max, sig.digital_min, sig.digital_max)
        out.append(
            BreathingRecord(
                subject_id=subject,
                channel=channel,
                sample_rate_hz=sig.samples_per_record / header.record_duration_s,
                samples=physical,
            )
        )
    if not out:
        raise NoMatchingChannel(f"{path}: no channel label matches {sorted(aliases)}")
    return out


def _edf_num(value, width: int = 8) -> str:
    text = repr(float(value)) if not float(value).is_integer() else str(int(value))
    if len(text) > width:
        text = f"{float(value):.{width}g}"[:width]
    return text.ljust(width)


def write_edf(
    path,
    signals: Sequence[tuple[str, BreathingRecord]],
    physical_range: tuple[float, float] | None = None,
    digital_range: tuple[int, int] = (-32768, 32767),
    patient_id: str = "X",
    record_duration_s: int = 1,
) -> None:
    """Write labeled records as a plain EDF file (16-bit, one-second data records)."""
    if not signals:
        raise ValueError("nothing to write")
    spr = []
    n_records = None
    for label, rec in signals:
        per = rec.sample_rate_hz * record_duration_s
        if not float(per).is_integer():
            raise ValueError(f"{label}: rate {rec.sample_rate_hz} not integral per data record")
        per = int(per)
        if rec.samples.size % per:
            raise ValueError(f"{label}: length not a whole number of data records")
        count = rec.samples.size // per
        if n_records is not None and count != n_records:
            raise ValueError("signals cover different durations")
        n_records = count
        spr.append(per)
    ns = len(signals)
    dmin, dmax = digital_range
    headers = []
    for label, rec in signals:
        if physical_range is None:
            lo, hi = float(rec.samples.min()), float(rec.samples.max())
            if lo == hi:
                lo, hi = lo - 1.0, hi + 1.0
        else:
            lo, hi = physical_range
        lo_txt, hi_txt = _edf_num(lo), _edf_num(hi)
        # quantize with the values a reader will parse back
        headers.append((label, lo_txt, hi_txt, float(lo_txt), float(hi_txt)))

    fixed = (
        "0".ljust(8)
        + patient_id.ljust(80)[:80]
        + "Startdate X X X X".ljust(80)
        + "01.01.00"
        + "00.00.00"
        + str(256 * (ns + 1)).ljust(8)
        + "".ljust(44)
        + str(n_records).ljust(8)
        + str(record_duration_s).ljust(8)
        + str(ns).ljust(4)
    )
    sig_fields = [
        [h[0].ljust(16)[:16] for h in headers],
        ["".ljust(80)] * ns,
        ["".ljust(8)] * ns,
        [h[1] for h in headers],
        [h[2] for h in headers],
        [str(dmin).ljust(8)] * ns,
        [str(dmax).ljust(8)] * ns,
        ["".ljust(80)] * ns,
        [str(s).ljust(8) for s in spr],
        ["".ljust(32)] * ns,
    ]
    head = fixed + "".join("".join(col) for col in sig_fields)
    blocks = []
    for (label, rec), h, per in zip(signals, headers, spr):
        digital = edf_encode(rec.samples, h[3], h[4], dmin, dmax)
        blocks.append(digital.reshape(n_records, per))
    body = np.concatenate(blocks, axis=1).astype("<i2").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(head.encode("ascii"))
        fh.write(body)
    os.replace(tmp, path)


# --------------------------------------------------------------- conditioning


def resample(record: BreathingRecord, target_hz: float = CANONICAL_HZ) -> BreathingRecord:
    """Linear interpolation onto a uniform ``target_hz`` grid starting at t=0."""
    if not target_hz > 0:
        raise ValueError("target_hz must be positive")
    if record.sample_rate_hz == target_hz:
        return record
    n = record.samples.size
    n_out = max(1, int(math.floor(n * target_hz / record.sample_rate_hz + 1e-9)))
    t_src = np.arange(n) / record.sample_rate_hz
    t_out = np.arange(n_out) / target_hz
    return record.with_samples(np.interp(t_out, t_src, record.samples), sample_rate_hz=float(target_hz))


def normalize(record: BreathingRecord) -> BreathingRecord:
    """Robust z-score: subtract the median, divide by the interquartile range.

    Quartiles use linear interpolation between order statistics. A signal with
    zero IQR becomes all zeros and carries the ``"degenerate_signal"`` flag.
    """
    x = record.samples
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    iqr = q3 - q1
    if iqr <= 0:
        warnings.warn(f"{record.subject_id}: zero interquartile range", DegenerateSignal, stacklevel=2)
        return record.with_samples(np.zeros_like(x), flags=record.flags | {"degenerate_signal"})
    return record.with_samples((x - med) / iqr)


def segment_epochs(record: BreathingRecord) -> np.ndarray:
    """Split a 10 Hz record into (n_epochs, 300) rows, dropping the partial tail."""
    if record.sample_rate_hz != CANONICAL_HZ:
        raise ValueError(f"expected {CANONICAL_HZ} Hz input, got {record.sample_rate_hz}")
    n_epochs = record.samples.size // EPOCH_SAMPLES
    if n_epochs < 1:
        raise TooShort(f"{record.samples.size} samples is less than one epoch")
    return record.samples[: n_epochs * EPOCH_SAMPLES].reshape(n_epochs, EPOCH_SAMPLES)


def prepare(record: BreathingRecord) -> BreathingRecord:
    """Canonical model input: 10 Hz, robust-normalized."""
    return normalize(resample(record, CANONICAL_HZ))


def check_pipeline_entry(record: BreathingRecord) -> None:
    if record.duration_s < MIN_PIPELINE_S:
        raise TooShort(f"{record.subject_id}: {record.duration_s:.0f} s recording, need at least one hour")



# ----------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ManifestEntry:
    record_id: str
    subject_id: str
    record: Path
    stages: Path | None
    events: Path | None
    meta: Path | None


def read_manifest(path) -> list[ManifestEntry]:
    """Rows of ``record_id,subject_id,record,stages,events,meta``; paths are
    relative to the manifest's directory and label/meta columns may be blank."""
    path = Path(path)
    base = path.parent
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"record_id", "subject_id", "record"} - set(reader.fieldnames or [])
        if missing:
            raise MalformedRow(1, f"manifest missing columns {sorted(missing)}")
        out = []
        for row in reader:
            opt = lambda key: base / row[key] if row.get(key) else None
            out.append(ManifestEntry(row["record_id"], row["subject_id"], base / row["record"], opt("stages"), opt("events"), opt("meta")))
    if not out:
        raise EmptyFile(f"{path}: manifest lists no records")
    return out
