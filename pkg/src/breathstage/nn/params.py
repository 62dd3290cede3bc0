"""Parameter storage, initialization, checkpoints and the Adam optimizer."""

from __future__ import annotations

import hashlib
import math
import os
import struct
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

MAGIC = b"BSTGCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def make_rng(seed) -> np.random.Generator:
    """Seeded PCG64 generator; streams are identical across platforms."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def he_init(shape, rng: np.random.Generator, gain: float = 1.0) -> np.ndarray:
    """Uniform on ``±gain*sqrt(6/fan_in)`` with ``fan_in = prod(shape[1:])``."""
    shape = tuple(int(s) for s in shape)
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    bound = gain * math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ParameterStore:
    """Named float64 tensors with matching gradient accumulators.

    Iteration is always in sorted path order so checksums, checkpoints and
    optimizer updates do not depend on insertion order.
    """

    def __init__(self, params: dict | None = None):
        self._params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        for path, value in (params or {}).items():
            self[path] = value

    def __setitem__(self, path: str, value) -> None:
        arr = np.array(value, dtype=np.float64)
        self._params[path] = arr
        self.grads[path] = np.zeros_like(arr)

    def __getitem__(self, path: str) -> np.ndarray:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return [(k, self._params[k]) for k in self]

    def paths(self, prefix: str = "") -> list[str]:
        return [k for k in self if k.startswith(prefix)]

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Parameters under ``prefix``, keyed by the remainder of the path."""
        return {k[len(prefix) :]: self._params[k] for k in self.paths(prefix)}

    def accumulate(self, prefix: str, grads: dict) -> None:
        for name, g in grads.items():
            self.grads[prefix + name] += g

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: v.copy() for k, v in self._params.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self._params.values())

    def checksum(self, prefix: str = "") -> str:
        h = hashlib.sha256()
        for path in self.paths(prefix):
            arr = self._params[path]
            h.update(path.encode())
            h.update(np.asarray(arr.shape, dtype="<u8").tobytes())
            h.update(arr.astype("<f8").tobytes())
        return h.hexdigest()

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<II", VERSION, len(self._params))]
        for path in self:
            arr = self._params[path]
            name = path.encode("utf-8")
            parts.append(struct.pack("<H", len(name)))
            parts.append(name)
            parts.append(struct.pack("<B", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(arr.astype("<f8").tobytes())
        body = b"".join(parts)
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParameterStore":
        if len(data) < len(MAGIC) + 8 + 32 or data[: len(MAGIC)] != MAGIC:
            raise CheckpointError("not a parameter checkpoint")
        body, digest = data[:-32], data[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise CheckpointError("checkpoint checksum mismatch")
        pos = len(MAGIC)
        version, count = struct.unpack_from("<II", body, pos)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos += 8
        store = cls()
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, pos)
            pos += 2
            path = body[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            store[path] = np.frombuffer(body, dtype="<f8", count=n, offset=pos).reshape(shape)
            pos += 8 * n
        if pos != len(body):
            raise CheckpointError("trailing bytes in checkpoint")
        return store

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "ParameterStore":
        return cls.from_bytes(Path(path).read_bytes())


class Adam:
    """Adam with bias correction over the selected parameter paths."""

    def __init__(
        self,
        store: ParameterStore,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        paths: Iterable[str] | None = None,
        clip_norm: float | None = None,
    ):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.paths = sorted(paths) if paths is not None else list(store)
        self.m = {p: np.zeros_like(store[p]) for p in self.paths}
        self.v = {p: np.zeros_like(store[p]) for p in self.paths}
        self.t = 0

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(self.store.grads[p] ** 2)) for p in self.paths))

    def step(self) -> None:
        self.t += 1
        scale = 1.0
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p in self.paths:
            g = self.store.grads[p] * scale
            m, v = self.m[p], self.v[p]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            param = self.store[p]
            param -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
