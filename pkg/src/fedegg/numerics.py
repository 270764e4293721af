"""Deterministic vector helpers and seeded random streams.

Parameter vectors are plain 1-D ``float64`` numpy arrays. Every stochastic
choice in a run draws from a stream derived from ``(master_seed, purpose, t, k)``
so a run can be replayed exactly and streams never collide across purposes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

__all__ = [
    "DegenerateInputError",
    "as_params",
    "cosine_similarity",
    "mean_vector",
    "derive_stream",
    "purpose_code",
    "PiecewiseSchedule",
]


class DegenerateInputError(ValueError):
    """Raised when an operation is undefined for its input (e.g. a zero vector)."""


def as_params(values) -> np.ndarray:
    """Copy ``values`` into a contiguous 1-D float64 array and reject non-finite entries."""
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValueError("parameter vector contains NaN or Inf")
    return arr


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    cos = float(np.dot(a, b)) / (na * nb)
    return min(1.0, max(-1.0, cos))


def mean_vector(vs: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise mean, accumulated in list order so the result is bit-reproducible.

    Computed as ``v0 + sum(v_i - v0) / n``, which returns identical inputs unchanged.
    """
    if len(vs) == 0:
        raise ValueError("mean of an empty list")
    base = np.array(vs[0], dtype=np.float64).reshape(-1)
    acc = np.zeros_like(base)
    for v in vs[1:]:
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.shape != base.shape:
            raise ValueError(f"dimension mismatch: {base.shape[0]} vs {v.shape[0]}")
        acc += v - base
    return base + acc / len(vs)


def purpose_code(purpose: str) -> int:
    # stable across processes, unlike hash()
    digest = hashlib.blake2b(purpose.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_stream(master_seed: int, purpose: str, t: int = 0, k: int = 0) -> np.random.Generator:
    """Return an independent generator for ``(master_seed, purpose, t, k)``.

    The path is fed to ``SeedSequence`` as a spawn key, which hashes it into
    the generator state; distinct paths give statistically independent streams.
    """
    if master_seed < 0 or t < 0 or k < 0:
        raise ValueError("seed and stream indices must be nonnegative")
    seq = np.random.SeedSequence(int(master_seed), spawn_key=(purpose_code(purpose), int(t), int(k)))
    return np.random.Generator(np.random.PCG64(seq))


@dataclass(frozen=True)
class PiecewiseSchedule:
    """Step-size schedule constant on ``[start_i, start_{i+1})``; rounds count from 1.

    ``stages`` is a sorted tuple of ``(start_round, value)`` whose first start
    is at most 1. Text form: ``"1:1e-2,100:1e-3,200:1e-4"`` or a bare number.
    """

    stages: Tuple[Tuple[int, float], ...]

    def __post_init__(self):
        if not self.stages:
            raise ValueError("schedule needs at least one stage")
        starts = [s for s, _ in self.stages]
        if starts != sorted(starts) or len(set(starts)) != len(starts):
            raise ValueError("schedule stages must have strictly increasing starts")
        if starts[0] > 1:
            raise ValueError("first schedule stage must start at round 1 or earlier")
        for _, v in self.stages:
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"schedule value {v} must be finite and nonnegative")

    @classmethod
    def constant(cls, value: float) -> "PiecewiseSchedule":
        return cls(((0, float(value)),))

    @classmethod
    def parse(cls, text: str) -> "PiecewiseSchedule":
        text = text.strip()
        if ":" not in text:
            return cls.constant(float(text))
        stages = []
        for part in text.split(","):
            start, value = part.split(":")
            stages.append((int(start), float(value)))
        return cls(tuple(stages))

    def __call__(self, t: int) -> float:
        value = self.stages[0][1]
        for start, v in self.stages:
            if t >= start:
                value = v
        return value

    def __str__(self) -> str:
        if len(self.stages) == 1:
            return repr(self.stages[0][1])
        return ",".join(f"{s}:{v!r}" for s, v in self.stages)
