"""Synthetic ground-truth cohorts: Markov hypnograms, stage-keyed breathing,
injected apneas/hypopneas and demographics.

Each subject draws from its own child seed, so a cohort is a deterministic
function of its :class:`CohortSpec` regardless of generation order.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from breathstage.signal_io import (
    CANONICAL_HZ,
    EPOCH_S,
    BreathingRecord,
    Channel,
    Event,
    LabelSet,
    Race,
    Sex,
    SubjectMeta,
    save_record,
    write_events,
    write_json_atomic,
    write_stage_labels,
)
from breathstage.stages import Stage5


class CohortSpecError(ValueError):
    def __init__(self, field_name: str, reason: str):
        super().__init__(f"{field_name}: {reason}")
        self.field = field_name


class TargetInfeasible(ValueError):
    pass


# ------------------------------------------------------------------ stages


DEFAULT_TRANSITIONS = np.array(
    [
        # W     N1     N2     N3     REM
        [0.920, 0.060, 0.020, 0.000, 0.000],  # W
        [0.060, 0.700, 0.220, 0.000, 0.020],  # N1
        [0.010, 0.020, 0.940, 0.020, 0.010],  # N2
        [0.010, 0.000, 0.040, 0.950, 0.000],  # N3
        [0.020, 0.020, 0.020, 0.000, 0.940],  # REM
    ]
)


@dataclass
class StageGenerator:
    transitions: np.ndarray = field(default_factory=lambda: DEFAULT_TRANSITIONS.copy())
    initial: np.ndarray = field(default_factory=lambda: np.array([0.85, 0.15, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        if self.transitions.shape != (5, 5) or np.any(self.transitions < 0):
            raise ValueError("transition matrix must be a nonnegative 5x5 array")
        if np.any(np.abs(self.transitions.sum(axis=1) - 1) > 1e-9):
            raise ValueError("transition rows must sum to 1")
        if np.any(self.initial < 0) or abs(self.initial.sum() - 1) > 1e-9:
            raise ValueError("initial distribution must sum to 1")

    def is_irreducible(self) -> bool:
        reach = (self.transitions > 0).astype(int) + np.eye(5, dtype=int)
        closure = np.linalg.matrix_power(reach, 5) > 0
        return bool(closure.all())

    def stationary(self) -> np.ndarray:
        vals, vecs = np.linalg.eig(self.transitions.T)
        v = np.real(vecs[:, np.argmin(np.abs(vals - 1))])
        return v / v.sum()


def gen_stage_sequence(gen: StageGenerator, n_epochs: int, rng: np.random.Generator) -> np.ndarray:
    """Sample a hypnogram of ``n_epochs`` Stage5 codes from the Markov chain."""
    cum = np.cumsum(gen.transitions, axis=1)
    u = rng.random(n_epochs)
    out = np.empty(n_epochs, dtype=np.int64)
    state = int(np.searchsorted(np.cumsum(gen.initial), u[0], side="right"))
    out[0] = min(state, 4)
    for i in range(1, n_epochs):
        out[i] = min(int(np.searchsorted(cum[out[i - 1]], u[i], side="right")), 4)
    return out


# --------------------------------------------------------------- breathing


@dataclass(frozen=True)
class StageBreathing:
    rate_bpm: float
    rate_sd_bpm: float
    amp_jitter: float
    amplitude: float = 1.0


DEFAULT_BREATHING = {
    Stage5.WAKE: StageBreathing(15.0, 3.0, 0.30, 1.0),
    Stage5.N1: StageBreathing(14.0, 2.0, 0.15, 0.95),
    Stage5.N2: StageBreathing(13.0, 1.0, 0.08, 1.0),
    Stage5.N3: StageBreathing(12.5, 0.3, 0.03, 1.15),
    Stage5.REM: StageBreathing(14.0, 2.5, 0.25, 0.85),
}


@dataclass
class BreathingConfig:
    stages: dict = field(default_factory=lambda: dict(DEFAULT_BREATHING))
    noise_sd: float = 0.1
    crossfade_s: float = 5.0
    sample_rate_hz: float = CANONICAL_HZ

    @classmethod
    def noiseless(cls) -> "BreathingConfig":
        return cls(
            stages={s: StageBreathing(b.rate_bpm, 0.0, 0.0, b.amplitude) for s, b in DEFAULT_BREATHING.items()},
            noise_sd=0.0,
        )


def _param_table(cfg: BreathingConfig) -> np.ndarray:
    return np.array(
        [[b.rate_bpm, b.rate_sd_bpm, b.amp_jitter, b.amplitude] for b in (cfg.stages[Stage5(s)] for s in range(5))]
    )


def _stage_params_at(t: float, stages: np.ndarray, table: np.ndarray, half: float) -> np.ndarray:
    """(rate, sd, jitter, amplitude) at time ``t``, crossfaded across stage boundaries."""
    n_ep = stages.size
    ep = min(int(t // EPOCH_S), n_ep - 1)
    if half > 0 and n_ep > 1:
        boundary = min(max(int(round(t / EPOCH_S)), 1), n_ep - 1)
        offset = t - boundary * EPOCH_S
        if abs(offset) < half:
            a, b = stages[boundary - 1], stages[boundary]
            if a != b:
                w = (offset + half) / (2 * half)
                return (1 - w) * table[a] + w * table[b]
    return table[stages[ep]]


def synth_breathing(
    stages,
    rng: np.random.Generator,
    cfg: BreathingConfig | None = None,
    subject_id: str = "synthetic",
    channel: Channel = Channel.RADIO,
) -> BreathingRecord:
    """One breath per sine cycle; each breath draws its own rate and amplitude.

    Amplitude changes land on zero crossings, so the waveform stays continuous.
    """
    cfg = cfg or BreathingConfig()
    stages = np.asarray(stages, dtype=np.int64)
    table = _param_table(cfg)
    half = cfg.crossfade_s / 2
    duration = stages.size * EPOCH_S
    fs = cfg.sample_rate_hz
    # upper bound on breath count: 40 bpm
    max_breaths = int(duration / 60 * 40) + 2
    z_rate = rng.standard_normal(max_breaths).tolist()
    z_amp = rng.standard_normal(max_breaths).tolist()
    starts, periods, amps = [], [], []
    t = 0.0
    k = 0
    while t < duration:
        rate, sd, jitter, base = _stage_params_at(t, stages, table, half).tolist()
        bpm = min(max(rate + sd * z_rate[k], 4.0), 40.0)
        starts.append(t)
        periods.append(60.0 / bpm)
        amps.append(base * max(1.0 + jitter * z_amp[k], 0.05))
        t += periods[-1]
        k += 1
    starts, periods, amps = np.array(starts), np.array(periods), np.array(amps)
    ts = np.arange(int(round(duration * fs))) / fs
    idx = np.searchsorted(starts, ts, side="right") - 1
    phase = (ts - starts[idx]) / periods[idx]
    x = amps[idx] * np.sin(2 * np.pi * phase)
    if cfg.noise_sd > 0:
        x = x + cfg.noise_sd * rng.standard_normal(x.size)
    return BreathingRecord(subject_id, channel, fs, x)


def band_limited_noise(n: int, fs: float, band: tuple[float, float], sd: float, rng: np.random.Generator) -> np.ndarray:
    if sd <= 0:
        return np.zeros(n)
    sos = sps.butter(4, band, btype="bandpass", fs=fs, output="sos")
    noise = sps.sosfiltfilt(sos, rng.standard_normal(n))
    return noise * (sd / noise.std())


# ------------------------------------------------------------------ events

APNEA_SCALE = (0.0, 0.05)
HYPOPNEA_SCALE = (0.3, 0.7)
EVENT_DURATION_S = (10, 60)
EVENT_EXCESS_MEAN_S = 12.0
MIN_EVENT_GAP_S = 3


def _sleep_runs(stages: np.ndarray) -> list[tuple[int, int]]:
    """(start_s, end_s) of maximal non-Wake stretches."""
    sleep = np.concatenate([[False], stages != Stage5.WAKE, [False]])
    edges = np.flatnonzero(np.diff(sleep.astype(np.int8)))
    return [(int(a) * EPOCH_S, int(b) * EPOCH_S) for a, b in zip(edges[::2], edges[1::2])]


def inject_events(
    record: BreathingRecord,
    stages,
    target_ahi: float,
    rng: np.random.Generator,
    hypopnea_fraction: float = 0.6,
) -> tuple[BreathingRecord, list[Event]]:
    """Scale breathing amplitude down inside randomly placed sleep-time events.

    Events sit on whole seconds, last 10-60 s, stay inside a single sleep
    stretch and keep at least 3 s apart. The count is ``round(target_ahi * TST)``.
    """
    stages = np.asarray(stages, dtype=np.int64)
    tst_h = np.count_nonzero(stages != Stage5.WAKE) * EPOCH_S / 3600.0
    n_events = int(round(target_ahi * tst_h))
    if n_events == 0:
        return record, []
    lo_d, hi_d = EVENT_DURATION_S
    # right-skewed durations, mean about 22 s
    durations = np.minimum(lo_d + np.floor(rng.exponential(EVENT_EXCESS_MEAN_S, size=n_events)), hi_d).astype(int)
    # longest first: the free space fragments as it fills
    free = _sleep_runs(stages)
    placed: list[tuple[int, int]] = []
    for d in sorted(durations.tolist(), reverse=True):
        counts = np.array([max(b - a - d + 1, 0) for a, b in free])
        total = int(counts.sum())
        if total == 0:
            raise TargetInfeasible(f"sleep time cannot hold {n_events} events (AHI {target_ahi})")
        pick = int(rng.integers(total))
        j = int(np.searchsorted(np.cumsum(counts), pick, side="right"))
        a, b = free[j]
        start = a + pick - int(counts[:j].sum())
        placed.append((start, start + d))
        pieces = [(a, start - MIN_EVENT_GAP_S), (start + d + MIN_EVENT_GAP_S, b)]
        free[j : j + 1] = [(x, y) for x, y in pieces if y > x]
    placed.sort()
    fs = record.sample_rate_hz
    x = record.samples.copy()
    events = []
    kinds = rng.random(len(placed)) < hypopnea_fraction
    scales = rng.random(len(placed))
    for (start, end), is_hyp, u in zip(placed, kinds, scales):
        lo, hi = HYPOPNEA_SCALE if is_hyp else APNEA_SCALE
        scale = lo + (hi - lo) * u
        x[int(start * fs) : int(end * fs)] *= scale
        events.append(Event(float(start), float(end), "hypopnea" if is_hyp else "apnea"))
    return record.with_samples(x), events


# ------------------------------------------------------------------ cohort

SEVERITY_AHI_RANGES = {
    "Normal": (0.0, 5.0),
    "Mild": (5.0, 15.0),
    "Moderate": (15.0, 30.0),
    "Severe": (30.0, 60.0),
}

DEFAULT_COMORBIDITIES = {"hypertension": 0.3, "depression": 0.15, "diabetes": 0.12, "parkinsons": 0.03}
DEFAULT_MEDICATIONS = {"ssri": 0.1, "benzodiazepine": 0.08, "beta_blocker": 0.15}


@dataclass
class CohortSpec:
    n_subjects: int = 200
    night_hours: float = 8.0
    race_probs: dict = field(default_factory=lambda: {"Asian": 0.1, "Black": 0.1, "White": 0.7, "Others": 0.1})
    female_prob: float = 0.5
    age_mean: float = 55.0
    age_sd: float = 15.0
    severity_probs: dict = field(default_factory=lambda: {"Normal": 0.3, "Mild": 0.3, "Moderate": 0.2, "Severe": 0.2})
    channel_probs: dict = field(default_factory=lambda: {"Radio": 0.5, "ThoraxBelt": 0.25, "AbdomenBelt": 0.25})
    minority_race: str = "Black"
    minority_noise_sd: float = 0.0
    minority_noise_band: tuple = (0.4, 1.2)
    noise_sd: float = 0.1
    multi_visit_prob: float = 0.0
    comorbidity_probs: dict = field(default_factory=lambda: dict(DEFAULT_COMORBIDITIES))
    medication_probs: dict = field(default_factory=lambda: dict(DEFAULT_MEDICATIONS))
    seed: int = 0

    def validate(self) -> None:
        if self.n_subjects < 1:
            raise CohortSpecError("n_subjects", "must be at least 1")
        if not self.night_hours > 0:
            raise CohortSpecError("night_hours", "must be positive")
        for name, valid in (
            ("race_probs", {r.value for r in Race}),
            ("severity_probs", set(SEVERITY_AHI_RANGES)),
            ("channel_probs", {c.value for c in Channel}),
        ):
            probs = getattr(self, name)
            unknown = set(probs) - valid
            if unknown:
                raise CohortSpecError(name, f"unknown keys {sorted(unknown)}")
            if any(p < 0 for p in probs.values()):
                raise CohortSpecError(name, "probabilities must be nonnegative")
            if abs(sum(probs.values()) - 1.0) > 1e-9:
                raise CohortSpecError(name, f"probabilities sum to {sum(probs.values()):g}, not 1")
        for name in ("female_prob", "multi_visit_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise CohortSpecError(name, "must lie in [0, 1]")
        for name in ("comorbidity_probs", "medication_probs"):
            if any(not 0 <= p <= 1 for p in getattr(self, name).values()):
                raise CohortSpecError(name, "each probability must lie in [0, 1]")
        for name in ("minority_noise_sd", "noise_sd", "age_sd"):
            if getattr(self, name) < 0:
                raise CohortSpecError(name, "must be nonnegative")
        if self.minority_race not in {r.value for r in Race}:
            raise CohortSpecError("minority_race", f"unknown race {self.minority_race!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "CohortSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise CohortSpecError(sorted(unknown)[0], "unknown field")
        spec = cls(**data)
        spec.minority_noise_band = tuple(spec.minority_noise_band)
        spec.validate()
        return spec

    @classmethod
    def from_json(cls, path) -> "CohortSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["minority_noise_band"] = list(self.minority_noise_band)
        return out


@dataclass
class SyntheticSubject:
    record_id: str
    record: BreathingRecord
    labels: LabelSet
    meta: SubjectMeta
    target_ahi: float
    minority: bool


def _choose(rng, probs: dict):
    keys = sorted(probs)
    p = np.array([probs[k] for k in keys])
    return keys[int(rng.choice(len(keys), p=p / p.sum()))]


def gen_subject(spec: CohortSpec, index: int, rng: np.random.Generator, gen: StageGenerator | None = None):
    """All visits of subject ``index``, drawn from ``rng``."""
    gen = gen or StageGenerator()
    sid = f"S{index:04d}"
    race = _choose(rng, spec.race_probs)
    sex = Sex.FEMALE if rng.random() < spec.female_prob else Sex.MALE
    age = float(np.clip(rng.normal(spec.age_mean, spec.age_sd), 18.0, 95.0))
    comorb = frozenset(k for k in sorted(spec.comorbidity_probs) if rng.random() < spec.comorbidity_probs[k])
    meds = frozenset(k for k in sorted(spec.medication_probs) if rng.random() < spec.medication_probs[k])
    meta = SubjectMeta(sid, round(age, 1), sex, Race(race), comorb, meds)
    minority = race == spec.minority_race
    severity = _choose(rng, spec.severity_probs)
    lo, hi = SEVERITY_AHI_RANGES[severity]
    n_visits = 1 + (int(rng.integers(1, 3)) if rng.random() < spec.multi_visit_prob else 0)
    n_epochs = int(spec.night_hours * 3600 // EPOCH_S)
    bcfg = BreathingConfig(noise_sd=spec.noise_sd)
    out = []
    for visit in range(1, n_visits + 1):
        channel = Channel(_choose(rng, spec.channel_probs))
        stages = gen_stage_sequence(gen, n_epochs, rng)
        rec = synth_breathing(stages, rng, bcfg, subject_id=sid, channel=channel)
        target = float(rng.uniform(lo, hi))
        rec, events = inject_events(rec, stages, target, rng)
        if minority and spec.minority_noise_sd > 0:
            extra = band_limited_noise(rec.samples.size, rec.sample_rate_hz, spec.minority_noise_band, spec.minority_noise_sd, rng)
            rec = rec.with_samples(rec.samples + extra)
        record_id = sid if n_visits == 1 else f"{sid}_v{visit}"
        out.append(SyntheticSubject(record_id, rec, LabelSet(stages, events), meta, target, minority))
    return out


def gen_cohort(spec: CohortSpec) -> list[SyntheticSubject]:
    spec.validate()
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_subjects)
    gen = StageGenerator()
    cohort = []
    for i, child in enumerate(children):
        cohort.extend(gen_subject(spec, i, np.random.default_rng(child), gen))
    return cohort


MANIFEST_FIELDS = ["record_id", "subject_id", "record", "stages", "events", "meta"]


def write_cohort(cohort: list[SyntheticSubject], out_dir, spec: CohortSpec | None = None) -> Path:
    """Write records, sidecars and labels; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for subj in cohort:
        rid = subj.record_id
        save_record(subj.record, out_dir / f"{rid}.csv", subj.meta)
        write_stage_labels(subj.labels.stages, out_dir / f"{rid}_stages.csv")
        write_events(subj.labels.events, out_dir / f"{rid}_events.csv")
        rows.append([rid, subj.meta.subject_id, f"{rid}.csv", f"{rid}_stages.csv", f"{rid}_events.csv", f"{rid}.json"])
    manifest = out_dir / "manifest.csv"
    tmp = manifest.with_name("manifest.csv.tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        writer.writerows(rows)
    tmp.replace(manifest)
    if spec is not None:
        write_json_atomic(out_dir / "cohort_spec.json", spec.to_dict())
    return manifest


def realized_ahi(labels: LabelSet) -> float:
    tst = labels.tst_hours
    return len(labels.events) / tst if tst > 0 else math.nan
