"""Per-second respiratory-event scoring, event post-processing and AHI grading."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from breathstage import nn
from breathstage.nn import functional as F
from breathstage.signal_io import CANONICAL_HZ, BreathingRecord, Event, TooShort, _write_atomic
from breathstage.staging import BadConfig
from breathstage.training import LogRow

MIN_SCORE_S = 60
MIN_EVENT_S = 10.0
MERGE_GAP_S = 1.0


class ZeroSleepTime(ValueError):
    pass


class Severity(str, Enum):
    NORMAL = "Normal"
    MILD = "Mild"
    MODERATE = "Moderate"
    SEVERE = "Severe"

    @classmethod
    def from_ahi(cls, ahi: float) -> "Severity":
        if not ahi >= 0:
            raise ValueError(f"AHI must be a nonnegative number, got {ahi}")
        if ahi <= 5:
            return cls.NORMAL
        if ahi <= 15:
            return cls.MILD
        if ahi <= 30:
            return cls.MODERATE
        return cls.SEVERE


# -------------------------------------------------------------------- model


@dataclass(frozen=True)
class ApneaModelConfig:
    strides: tuple = (2, 1, 5, 1, 1, 1, 1)
    channels: tuple = (16, 16, 32, 32, 64, 64, 1)
    kernel: int = 9

    def validate(self) -> None:
        if len(self.strides) != 7 or len(self.channels) != 7:
            raise BadConfig("the event model has exactly 7 conv layers")
        if math.prod(self.strides) != int(CANONICAL_HZ):
            raise BadConfig(f"stride product {math.prod(self.strides)} != {int(CANONICAL_HZ)}")
        if self.channels[-1] != 1:
            raise BadConfig("the last layer must have one output channel")
        if self.kernel % 2 == 0:
            raise BadConfig("kernel must be odd")

    def skips(self) -> list[bool]:
        """Identity skip wherever a layer keeps both channel count and length."""
        c_in, out = 1, []
        for s, c in zip(self.strides, self.channels):
            out.append(s == 1 and c == c_in)
            c_in = c
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ApneaModelConfig":
        cfg = cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})
        cfg.validate()
        return cfg


def build_apnea_model(config: ApneaModelConfig | None = None, rng=0) -> nn.ParameterStore:
    config = config or ApneaModelConfig()
    config.validate()
    rng = nn.make_rng(rng)
    store = nn.ParameterStore()
    c_in = 1
    skips = config.skips()
    for i, c in enumerate(config.channels):
        gain = 0.5 if skips[i] or i == len(config.channels) - 1 else 1.0
        store[f"conv{i + 1}.w"] = nn.he_init((c, c_in, config.kernel), rng, gain=gain)
        store[f"conv{i + 1}.b"] = np.zeros(c)
        c_in = c
    return store


class ApneaModel:
    def __init__(self, config: ApneaModelConfig, params: nn.ParameterStore):
        config.validate()
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: ApneaModelConfig | None = None, seed=0) -> "ApneaModel":
        config = config or ApneaModelConfig()
        return cls(config, build_apnea_model(config, seed))

    def forward(self, x: np.ndarray, keep_cache: bool = True):
        """(N, T) with T a multiple of 10 -> (N, T/10) logits."""
        p = self.params
        h = np.asarray(x, dtype=np.float64)[:, None, :]
        pad = self.config.kernel // 2
        n_layers = len(self.config.strides)
        caches = []
        for i, (s, skip) in enumerate(zip(self.config.strides, self.config.skips())):
            z, c = F.conv1d_forward(h, p[f"conv{i + 1}.w"], p[f"conv{i + 1}.b"], s, pad)
            mask = None
            if i < n_layers - 1:
                z, mask = F.relu_forward(z)
            if skip:
                z = z + h
            caches.append((c, mask, skip) if keep_cache else None)
            h = z
        return h[:, 0, :], caches

    def backward(self, dlogits: np.ndarray, caches) -> None:
        p = self.params
        dh = dlogits[:, None, :]
        for i in range(len(caches) - 1, -1, -1):
            c, mask, skip = caches[i]
            dz = F.relu_backward(dh, mask) if mask is not None else dh
            dx, dw, db = F.conv1d_backward(dz, c)
            p.grads[f"conv{i + 1}.w"] += dw
            p.grads[f"conv{i + 1}.b"] += db
            dh = dx + dh if skip else dx

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        logits, _ = self.forward(np.atleast_2d(x), keep_cache=False)
        return F.sigmoid(logits)

    def save(self, path) -> None:
        path = Path(path)
        self.params.save(path)
        _write_atomic(path.with_suffix(".json"), json.dumps({"kind": "apnea", **asdict(self.config)}, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ApneaModel":
        path = Path(path)
        cfg = json.loads(path.with_suffix(".json").read_text())
        if cfg.pop("kind", None) != "apnea":
            raise BadConfig(f"{path} is not an apnea checkpoint")
        return cls(ApneaModelConfig.from_dict(cfg), nn.ParameterStore.load(path))


def score_events(model: ApneaModel, record: BreathingRecord) -> np.ndarray:
    """One event probability per whole second of a normalized 10 Hz record."""
    if record.sample_rate_hz != CANONICAL_HZ:
        raise ValueError(f"expected a {CANONICAL_HZ} Hz record, got {record.sample_rate_hz}")
    n_sec = int(record.samples.size // CANONICAL_HZ)
    if n_sec < MIN_SCORE_S:
        raise TooShort(f"{n_sec} s is shorter than {MIN_SCORE_S} s")
    x = record.samples[: n_sec * int(CANONICAL_HZ)]
    return model.predict_proba(x[None, :])[0]


# ---------------------------------------------------------- post-processing


@dataclass(frozen=True)
class RespiratoryEvent:
    start_s: float
    end_s: float

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


def threshold_runs(probs: Sequence[float], threshold: float = 0.5) -> list[tuple[float, float]]:
    """Maximal runs of seconds with ``prob >= threshold`` as ``[start, end)`` intervals."""
    above = np.asarray(probs, dtype=np.float64) >= threshold
    edges = np.diff(np.concatenate([[0], above.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    return [(float(a), float(b)) for a, b in zip(starts, ends)]


def postprocess_intervals(
    runs: Iterable[tuple[float, float]], merge_gap_s: float = MERGE_GAP_S, min_duration_s: float = MIN_EVENT_S
) -> list[RespiratoryEvent]:
    """Merge runs separated by at most ``merge_gap_s``, then drop short ones."""
    merged: list[list[float]] = []
    for start, end in sorted(runs):
        if merged and start - merged[-1][1] <= merge_gap_s:
            merged[-1][1] = max(merged[-1][1], end)
        else:
            merged.append([start, end])
    return [RespiratoryEvent(a, b) for a, b in merged if b - a >= min_duration_s]


def postprocess(probs: Sequence[float], threshold: float = 0.5) -> list[RespiratoryEvent]:
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return postprocess_intervals(threshold_runs(probs, threshold))


# ---------------------------------------------------------------------- AHI


@dataclass
class AhiReport:
    ahi: float
    severity: Severity
    n_events: int
    tst_hours: float
    subject_id: str = ""

    def csv_line(self) -> str:
        return f"{self.subject_id},{self.ahi!r},{self.severity.value},{self.n_events},{self.tst_hours!r}"


REPORT_HEADER = "subject_id,ahi,severity,n_events,tst_hours"


def compute_ahi(events: Sequence, tst_hours: float, subject_id: str = "") -> AhiReport:
    if not tst_hours > 0:
        raise ZeroSleepTime(f"total sleep time must be positive, got {tst_hours}")
    ahi = len(events) / tst_hours
    return AhiReport(ahi, Severity.from_ahi(ahi), len(events), tst_hours, subject_id)


def write_event_csv(events: Iterable[RespiratoryEvent], path) -> None:
    lines = ["start_s,end_s"] + [f"{e.start_s!r},{e.end_s!r}" for e in events]
    _write_atomic(path, "\n".join(lines) + "\n")


def write_reports(reports: Iterable[AhiReport], path) -> None:
    _write_atomic(path, "\n".join([REPORT_HEADER] + [r.csv_line() for r in reports]) + "\n")


def event_targets(events: Iterable[Event], n_seconds: int) -> np.ndarray:
    """1 for each second whose midpoint lies inside a labeled event, else 0."""
    y = np.zeros(n_seconds)
    mid = np.arange(n_seconds) + 0.5
    for e in events:
        y[(mid >= e.start_s) & (mid < e.end_s)] = 1.0
    return y


# ----------------------------------------------------------------- training


@dataclass
class ApneaTrainConfig:
    steps: int = 300
    batch_size: int = 8
    crop_s: int = 600
    lr: float = 1e-3
    pos_weight: float = 1.0
    seed: int = 0
    model: ApneaModelConfig = field(default_factory=ApneaModelConfig)


def train_apnea_model(
    signals: Sequence[np.ndarray],
    targets: Sequence[np.ndarray],
    cfg: ApneaTrainConfig,
    on_step: Callable[[LogRow], None] | None = None,
) -> ApneaModel:
    """Per-second BCE on random crops. ``signals`` are prepared 10 Hz arrays and
    ``targets`` the matching per-second 0/1 vectors."""
    rng = nn.make_rng([cfg.seed, 2])
    model = ApneaModel.create(cfg.model, rng)
    opt = nn.Adam(model.params, lr=cfg.lr, clip_norm=5.0)
    hz = int(CANONICAL_HZ)
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(signals), size=cfg.batch_size)
        crop = min(cfg.crop_s, min(targets[i].size for i in idx))
        xs, ys = [], []
        for i in idx:
            start = int(rng.integers(0, targets[i].size - crop + 1))
            xs.append(signals[i][start * hz : (start + crop) * hz])
            ys.append(targets[i][start : start + crop])
        model.params.zero_grad()
        logits, caches = model.forward(np.stack(xs))
        loss, d = F.sigmoid_bce(logits, np.stack(ys), cfg.pos_weight)
        model.backward(d, caches)
        opt.step()
        if on_step is not None:
            acc = float(np.mean((logits >= 0) == (np.stack(ys) > 0.5)))
            on_step(LogRow(step, 0, loss, acc))
    return model
