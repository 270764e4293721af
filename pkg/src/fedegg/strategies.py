"""Client update rules and server aggregation for FedAvg, FedProx, SCAFFOLD and FedNova."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .numerics import PiecewiseSchedule, mean_vector
from .objectives import Objective

__all__ = [
    "STRATEGY_KINDS",
    "DEFAULT_ETA",
    "StrategyConfig",
    "ClientUpdate",
    "local_update_sgd",
    "local_update_prox",
    "local_update_scaffold",
    "aggregate_mean",
    "aggregate_fednova",
    "scaffold_server_update",
    "sample_clients",
]

STRATEGY_KINDS = ("fedavg", "fedprox", "scaffold", "fednova")

DEFAULT_ETA = PiecewiseSchedule(((1, 1e-2), (100, 1e-3), (200, 1e-4)))


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "fedavg"
    local_steps: int = 5
    batch_size: int = 32
    eta_schedule: PiecewiseSchedule = field(default=DEFAULT_ETA)
    mu_prox: float = 0.0

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {STRATEGY_KINDS}")
        if self.local_steps < 1:
            raise ValueError("local_steps must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not self.mu_prox >= 0:
            raise ValueError("mu_prox must be nonnegative")


@dataclass
class ClientUpdate:
    client_id: int
    new_params: np.ndarray
    final_local_loss: float
    steps_taken: int
    control_delta: Optional[np.ndarray] = None


def _local_loop(
    w_global: np.ndarray,
    obj: Objective,
    steps: int,
    batch_size: int,
    eta: float,
    rng: np.random.Generator,
    mu_prox: float = 0.0,
    correction: Optional[np.ndarray] = None,
) -> np.ndarray:
    v = np.array(w_global, dtype=np.float64)
    for _ in range(steps):
        g = obj.stochastic_grad(v, rng, batch_size)
        # skipped when zero so reductions to plain SGD are bitwise exact
        if mu_prox != 0.0:
            g = g + mu_prox * (v - w_global)
        if correction is not None:
            g = g + correction
        v = v - eta * g
    return v


def local_update_sgd(
    w_global: np.ndarray, obj: Objective, cfg: StrategyConfig, rng: np.random.Generator, eta: float, client_id: int = 0
) -> ClientUpdate:
    v = _local_loop(w_global, obj, cfg.local_steps, cfg.batch_size, eta, rng)
    return ClientUpdate(client_id, v, obj.loss(v), cfg.local_steps)


def local_update_prox(
    w_global: np.ndarray, obj: Objective, cfg: StrategyConfig, rng: np.random.Generator, eta: float, client_id: int = 0
) -> ClientUpdate:
    """Local SGD on ``f_k(v) + mu/2 ||v - w_global||^2``."""
    v = _local_loop(w_global, obj, cfg.local_steps, cfg.batch_size, eta, rng, mu_prox=cfg.mu_prox)
    return ClientUpdate(client_id, v, obj.loss(v), cfg.local_steps)


def local_update_scaffold(
    w_global: np.ndarray,
    obj: Objective,
    cfg: StrategyConfig,
    c_global: np.ndarray,
    c_k: np.ndarray,
    rng: np.random.Generator,
    eta: float,
    client_id: int = 0,
) -> ClientUpdate:
    """Drift-corrected local SGD; returns the change in the client control variate.

    The new control is ``c_k - c_global + (w_global - v) / (steps * eta)``.
    """
    correction = c_global - c_k
    v = _local_loop(
        w_global, obj, cfg.local_steps, cfg.batch_size, eta, rng,
        correction=correction if np.any(correction) else None,
    )
    if eta > 0:
        c_new = c_k - c_global + (w_global - v) / (cfg.local_steps * eta)
    else:
        c_new = np.array(c_k, dtype=np.float64)
    return ClientUpdate(client_id, v, obj.loss(v), cfg.local_steps, control_delta=c_new - c_k)


def aggregate_mean(updates: Sequence[ClientUpdate]) -> np.ndarray:
    if not updates:
        raise ValueError("no client updates to aggregate")
    return mean_vector([u.new_params for u in updates])


def aggregate_fednova(
    updates: Sequence[ClientUpdate],
    w_global: np.ndarray,
    per_client_steps: Sequence[int],
    weights: Optional[Sequence[float]] = None,
) -> np.ndarray:
    """Normalized averaging: average per-step deltas, rescale by the mean step count.

    With uniform weights and equal step counts this is exactly the plain mean,
    so that case is computed as one (keeps the reduction to FedAvg bitwise).
    """
    if not updates:
        raise ValueError("no client updates to aggregate")
    steps = np.asarray(per_client_steps, dtype=np.float64)
    if steps.shape[0] != len(updates) or np.any(steps < 1):
        raise ValueError("need one step count >= 1 per update")
    if weights is None:
        if np.all(steps == steps[0]):
            return aggregate_mean(updates)
        p = np.full(len(updates), 1.0 / len(updates))
    else:
        p = np.asarray(weights, dtype=np.float64)
        if p.shape[0] != len(updates) or np.any(p < 0) or p.sum() <= 0:
            raise ValueError("weights must be nonnegative, one per update")
        p = p / p.sum()
    w_global = np.asarray(w_global, dtype=np.float64)
    direction = np.zeros_like(w_global)
    for pk, u, tk in zip(p, updates, steps):
        direction += pk * (w_global - u.new_params) / tk
    return w_global - float(p @ steps) * direction


def scaffold_server_update(c_global: np.ndarray, deltas: Sequence[np.ndarray], num_clients: int) -> np.ndarray:
    """``c <- c + (1/N) sum_k delta_k``: keeps ``c`` equal to the mean of all client controls."""
    out = np.array(c_global, dtype=np.float64)
    for d in deltas:
        out += d / num_clients
    return out


def sample_clients(num_clients: int, m: int, rng: np.random.Generator) -> List[int]:
    """``m`` distinct clients, uniform without replacement, in ascending id order."""
    if not 1 <= m <= num_clients:
        raise ValueError(f"need 1 <= m <= {num_clients}, got {m}")
    if m == num_clients:
        return list(range(num_clients))
    return sorted(int(i) for i in rng.choice(num_clients, size=m, replace=False))
