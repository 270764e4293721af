"""Server-side guiding task: threshold, log-loss-ratio gate and guiding updates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import Dataset
from .numerics import PiecewiseSchedule, cosine_similarity
from .objectives import Objective, features

__all__ = [
    "GuidanceConfig",
    "GuidanceState",
    "client_mean_feature",
    "tau_k",
    "tau_threshold",
    "llr",
    "gate_open",
    "guiding_step",
    "update_momentum_loss",
]


@dataclass(frozen=True)
class GuidanceConfig:
    """Knobs of the guiding mechanism.

    ``gamma_schedule=None`` means the guiding step size follows the client
    learning-rate schedule. ``tau_override`` replaces the threshold computed
    from feature similarity (``inf``/``-inf`` force the gate always open/shut).
    """

    rho: float = 2.0
    iota: float = -0.5
    log_base: float = 2.0
    beta: float = 0.9
    T_g: int = 1
    batch_size: int = 64
    gamma_schedule: Optional[PiecewiseSchedule] = None
    cos_floor: float = 1e-6
    loss_floor: float = 1e-12
    tau_override: Optional[float] = None

    def __post_init__(self):
        if not self.log_base > 1:
            raise ValueError("log_base must exceed 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.T_g < 1:
            raise ValueError("T_g must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not self.cos_floor > 0 or not self.loss_floor > 0:
            raise ValueError("floors must be positive")
        if self.tau_override is not None and math.isnan(self.tau_override):
            raise ValueError("tau_override must not be NaN")


@dataclass
class GuidanceState:
    tau: float
    loss_g: float
    guide_data: Optional[Dataset] = None
    loss_c: Optional[float] = None
    steps_taken_total: int = 0
    client_taus: Sequence[float] = field(default_factory=tuple)


def _log(x: float, base: float) -> float:
    if base == 2.0:
        return math.log2(x)
    return math.log(x) / math.log(base)


def client_mean_feature(task, w0: np.ndarray, data: Dataset) -> np.ndarray:
    if len(data) == 0:
        raise ValueError("empty dataset")
    return features(task, w0, data.features).mean(axis=0)


def tau_k(client_feat: np.ndarray, guide_feat: np.ndarray, cfg: GuidanceConfig) -> float:
    """Log-similarity of one client's mean feature to the guiding mean feature.

    Cosines at or below ``cfg.cos_floor`` are clamped so the log stays finite.
    """
    cos = cosine_similarity(client_feat, guide_feat)
    return _log(max(cos, cfg.cos_floor), cfg.log_base)


def tau_threshold(taus: Sequence[float], cfg: GuidanceConfig) -> float:
    if len(taus) == 0:
        raise ValueError("no client similarities to average")
    return cfg.rho * (math.fsum(taus) / len(taus)) + cfg.iota


def llr(loss_c: float, loss_g: float, log_base: float = 2.0) -> float:
    if not (loss_c > 0 and loss_g > 0):
        raise ValueError(f"losses must be positive, got {loss_c} and {loss_g}")
    return _log(loss_c / loss_g, log_base)


def gate_open(llr_value: float, tau: float) -> bool:
    return llr_value < tau


def guiding_step(
    w: np.ndarray,
    guide: Objective,
    gamma: float,
    rng: Optional[np.random.Generator] = None,
    batch_size: Optional[int] = None,
) -> np.ndarray:
    """One SGD step on the guiding objective; full gradient when no stream is given."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    w = np.asarray(w, dtype=np.float64)
    if w.shape[0] != guide.dim:
        raise ValueError(f"dimension mismatch: expected {guide.dim}, got {w.shape[0]}")
    if rng is None:
        grad = guide.loss_grad(w)[1]
    else:
        grad = guide.stochastic_grad(w, rng, batch_size or 1)
    return w - gamma * grad


def update_momentum_loss(loss_c_prev: Optional[float], mean_local_loss: float, beta: float) -> float:
    """Exponential smoothing of client losses; the first round takes the plain mean."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    if loss_c_prev is None:
        return float(mean_local_loss)
    return beta * loss_c_prev + (1.0 - beta) * mean_local_loss
