"""Sleep-staging network: 11 strided residual blocks, LSTM, self-attention,
and a three-layer convolutional head over the epoch axis.

The stride schedule multiplies to 300, so a 10 Hz night of E epochs comes
out of the encoder as exactly E feature vectors.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from breathstage import nn
from breathstage.nn import functional as F
from breathstage.signal_io import CANONICAL_HZ, EPOCH_SAMPLES, BreathingRecord, TooShort, _write_atomic
from breathstage.stages import COLLAPSE_MATRIX, Stage4, Stage5

N_STAGES = 5


class BadConfig(ValueError):
    pass


@dataclass(frozen=True)
class StagingModelConfig:
    strides: tuple = (1, 2, 1, 2, 1, 3, 1, 5, 1, 5, 1)
    channels: tuple = (16, 16, 32, 32, 64, 64, 64, 128, 128, 128, 128)
    kernel: int = 7
    lstm_hidden: int = 128
    attn_dim: int = 128
    head_kernels: tuple = (3, 3, 1)
    head_channels: tuple = (64, 64, 5)

    def validate(self) -> None:
        if len(self.strides) != 11 or len(self.channels) != 11:
            raise BadConfig("the encoder has exactly 11 residual blocks")
        if math.prod(self.strides) != EPOCH_SAMPLES:
            raise BadConfig(f"stride product {math.prod(self.strides)} != {EPOCH_SAMPLES}")
        if len(self.head_kernels) != 3 or len(self.head_channels) != 3:
            raise BadConfig("the head has exactly three convolutions")
        if self.head_channels[-1] != N_STAGES:
            raise BadConfig(f"head must end in {N_STAGES} channels")
        if self.attn_dim != self.lstm_hidden:
            raise BadConfig("attention dim must equal LSTM hidden size")
        if self.kernel % 2 == 0 or any(k % 2 == 0 for k in self.head_kernels):
            raise BadConfig("kernels must be odd")

    @classmethod
    def toy(cls) -> "StagingModelConfig":
        """Half-width variant used for desk-scale training."""
        base = cls()
        return cls(
            channels=tuple(c // 2 for c in base.channels),
            lstm_hidden=base.lstm_hidden // 2,
            attn_dim=base.attn_dim // 2,
            head_channels=(base.head_channels[0] // 2, base.head_channels[1] // 2, N_STAGES),
        )

    @classmethod
    def from_dict(cls, data: dict) -> "StagingModelConfig":
        cfg = cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})
        cfg.validate()
        return cfg


def build_staging_model(config: StagingModelConfig, rng) -> nn.ParameterStore:
    """Freshly initialized parameters; paths split into ``enc.*`` and ``head.*``."""
    config.validate()
    rng = nn.make_rng(rng)
    store = nn.ParameterStore()
    c_in = 1
    k = config.kernel
    for i, (s, c) in enumerate(zip(config.strides, config.channels)):
        pre = f"enc.block{i:02d}."
        store[pre + "conv1.w"] = nn.he_init((c, c_in, k), rng)
        store[pre + "conv1.b"] = np.zeros(c)
        # small residual branch keeps activations bounded without normalization layers
        store[pre + "conv2.w"] = nn.he_init((c, c, k), rng, gain=0.2)
        store[pre + "conv2.b"] = np.zeros(c)
        if s != 1 or c != c_in:
            store[pre + "proj.w"] = nn.he_init((c, c_in, 1), rng, gain=math.sqrt(0.5))
            store[pre + "proj.b"] = np.zeros(c)
        c_in = c
    h = config.lstm_hidden
    seq_gain = 1 / math.sqrt(6)  # bound 1/sqrt(fan_in)
    store["enc.lstm.wx"] = nn.he_init((4 * h, c_in), rng, gain=seq_gain)
    store["enc.lstm.wh"] = nn.he_init((4 * h, h), rng, gain=seq_gain)
    b = np.zeros(4 * h)
    b[h : 2 * h] = 1.0  # forget gate
    store["enc.lstm.b"] = b
    for name in ("wq", "wk", "wv"):
        store[f"enc.attn.{name}"] = nn.he_init((h, h), rng, gain=seq_gain)
    c_in = h
    for j, (kk, c) in enumerate(zip(config.head_kernels, config.head_channels)):
        gain = 1.0 if j < 2 else 0.5
        store[f"head.conv{j + 1}.w"] = nn.he_init((c, c_in, kk), rng, gain=gain)
        store[f"head.conv{j + 1}.b"] = np.zeros(c)
        c_in = c
    return store


class StagingModel:
    """Configuration plus parameters, with batched forward and backward passes."""

    def __init__(self, config: StagingModelConfig, params: nn.ParameterStore):
        config.validate()
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: StagingModelConfig | None = None, seed=0) -> "StagingModel":
        config = config or StagingModelConfig()
        return cls(config, build_staging_model(config, seed))

    # ---------------------------------------------------------------- encoder

    def encode(self, x: np.ndarray, keep_cache: bool = True):
        """(N, T) signal -> (N, E, H) post-attention epoch features."""
        p = self.params
        h = np.asarray(x, dtype=np.float64)[:, None, :]
        caches = []
        for i, s in enumerate(self.config.strides):
            h, c = F.residual_forward(h, p.group(f"enc.block{i:02d}."), s)
            caches.append(c if keep_cache else None)
        seq = h.transpose(0, 2, 1)
        lstm_out, c_lstm = F.lstm_forward(seq, p["enc.lstm.wx"], p["enc.lstm.wh"], p["enc.lstm.b"])
        att, c_att = F.attention_forward(lstm_out, p["enc.attn.wq"], p["enc.attn.wk"], p["enc.attn.wv"])
        feats = lstm_out + att
        cache = (caches, c_lstm, c_att) if keep_cache else None
        return feats, cache

    def encode_backward(self, dfeats: np.ndarray, cache) -> None:
        caches, c_lstm, c_att = cache
        p = self.params
        dl, dwq, dwk, dwv = F.attention_backward(dfeats, c_att)
        dl = dl + dfeats
        p.grads["enc.attn.wq"] += dwq
        p.grads["enc.attn.wk"] += dwk
        p.grads["enc.attn.wv"] += dwv
        dseq, dwx, dwh, db = F.lstm_backward(dl, c_lstm)
        p.grads["enc.lstm.wx"] += dwx
        p.grads["enc.lstm.wh"] += dwh
        p.grads["enc.lstm.b"] += db
        dh = dseq.transpose(0, 2, 1)
        for i in range(len(caches) - 1, -1, -1):
            dh, grads = F.residual_backward(dh, caches[i])
            p.accumulate(f"enc.block{i:02d}.", grads)

    # ------------------------------------------------------------------- head

    def head(self, feats: np.ndarray):
        """(N, E, H) features -> (N, E, 5) logits."""
        p = self.params
        z = feats.transpose(0, 2, 1)
        caches = []
        n_layers = len(self.config.head_kernels)
        for j, kk in enumerate(self.config.head_kernels):
            z, c = F.conv1d_forward(z, p[f"head.conv{j + 1}.w"], p[f"head.conv{j + 1}.b"], 1, kk // 2)
            mask = None
            if j < n_layers - 1:
                z, mask = F.relu_forward(z)
            caches.append((c, mask))
        return z.transpose(0, 2, 1), caches

    def head_backward(self, dlogits: np.ndarray, caches) -> np.ndarray:
        p = self.params
        dz = dlogits.transpose(0, 2, 1)
        for j in range(len(caches) - 1, -1, -1):
            c, mask = caches[j]
            if mask is not None:
                dz = F.relu_backward(dz, mask)
            dz, dw, db = F.conv1d_backward(dz, c)
            p.grads[f"head.conv{j + 1}.w"] += dw
            p.grads[f"head.conv{j + 1}.b"] += db
        return dz.transpose(0, 2, 1)

    # ------------------------------------------------------------------- full

    def forward(self, x: np.ndarray, keep_cache: bool = True):
        """Returns ``(logits (N,E,5), feats (N,E,H), cache)``."""
        feats, enc_cache = self.encode(x, keep_cache)
        logits, head_cache = self.head(feats)
        return logits, feats, (enc_cache, head_cache)

    def backward(self, dlogits: np.ndarray, cache, dfeats: np.ndarray | None = None, encoder: bool = True) -> None:
        enc_cache, head_cache = cache
        df = self.head_backward(dlogits, head_cache)
        if dfeats is not None:
            df = df + dfeats
        if encoder:
            self.encode_backward(df, enc_cache)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        logits, _, _ = self.forward(np.atleast_2d(x), keep_cache=False)
        return F.softmax(logits)

    # -------------------------------------------------------------------- I/O

    def save(self, path) -> None:
        path = Path(path)
        self.params.save(path)
        _write_atomic(path.with_suffix(".json"), json.dumps({"kind": "staging", **asdict(self.config)}, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "StagingModel":
        path = Path(path)
        cfg = json.loads(path.with_suffix(".json").read_text())
        if cfg.pop("kind", "staging") != "staging":
            raise BadConfig(f"{path} is not a staging checkpoint")
        return cls(StagingModelConfig.from_dict(cfg), nn.ParameterStore.load(path))


# ------------------------------------------------------------------ outputs


@dataclass
class Hypnogram:
    stages: np.ndarray  # Stage5 codes
    probs: np.ndarray  # (E, 5)

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> "Hypnogram":
        probs = np.asarray(probs, dtype=np.float64)
        # np.argmax returns the first maximum, i.e. the Wake<N1<N2<N3<REM tie order
        return cls(np.argmax(probs, axis=1).astype(np.int64), probs)

    @property
    def n_epochs(self) -> int:
        return int(self.stages.size)

    def probs4(self) -> np.ndarray:
        return self.probs @ COLLAPSE_MATRIX

    def stages4(self) -> np.ndarray:
        return collapse_to_4class(self)

    def to_csv(self, path) -> None:
        lines = ["epoch_index,stage5,stage4,p_w,p_n1,p_n2,p_n3,p_rem"]
        s4 = self.stages4()
        for i, (s, c, row) in enumerate(zip(self.stages.tolist(), s4.tolist(), self.probs.tolist())):
            probs = ",".join(repr(v) for v in row)
            lines.append(f"{i},{Stage5(s).code},{Stage4(c).code},{probs}")
        _write_atomic(path, "\n".join(lines) + "\n")

    @classmethod
    def read_csv(cls, path) -> "Hypnogram":
        data = np.genfromtxt(path, delimiter=",", skip_header=1, usecols=range(3, 8), ndmin=2)
        return cls.from_probs(data)


def collapse_to_4class(hyp: Hypnogram) -> np.ndarray:
    """4-class labels from summed N1+N2 probability mass, then argmax."""
    return np.argmax(hyp.probs @ COLLAPSE_MATRIX, axis=1).astype(np.int64)


def stage_night(model: StagingModel, record: BreathingRecord) -> Hypnogram:
    """Hypnogram for a normalized 10 Hz record; the partial final epoch is ignored."""
    if record.sample_rate_hz != CANONICAL_HZ:
        raise ValueError(f"expected a {CANONICAL_HZ} Hz record, got {record.sample_rate_hz}")
    n_epochs = record.samples.size // EPOCH_SAMPLES
    if n_epochs < 1:
        raise TooShort(f"{record.samples.size} samples is less than one epoch")
    x = record.samples[: n_epochs * EPOCH_SAMPLES][None, :]
    return Hypnogram.from_probs(model.predict_proba(x)[0])
