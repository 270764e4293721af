"""One-step convergence comparison of guided vs plain federated averaging.

Everything here works on quadratic tasks, where the optima, curvature
constants and expectations are available in closed form. The main entry
points are :func:`epsilon` (the additive correction term) and
:func:`one_step_experiment`, which estimates both one-step squared distances
to the federated optimum by Monte Carlo and checks them against it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .numerics import derive_stream
from .objectives import QuadraticTask, quad_optimum

__all__ = [
    "TheoryParams",
    "TaskPair",
    "OneStepResult",
    "gamma_g",
    "pi",
    "epsilon",
    "epsilon_expanded",
    "pi_upper_bound",
    "pi_bound_coefficient",
    "one_step_experiment",
    "consistency_check",
    "running_example",
    "random_pd",
    "random_instance",
    "verify_instances",
    "verify_running_example",
    "THEORY_COLUMNS",
]

THEORY_COLUMNS = (
    "instance_id", "d", "mu", "L", "eta", "gamma", "sigma_g", "gamma_g", "pi",
    "epsilon", "delta_fedegg", "delta_fedavg", "stderr", "holds",
)


@dataclass(frozen=True)
class TheoryParams:
    """Constants of one step. ``sigma_g`` and ``sigma_k`` bound the total
    (not per-coordinate) standard deviation of the stochastic gradients."""

    mu: float
    L: float
    gamma: float
    eta: float
    sigma_g: float = 0.0
    sigma_k: Tuple[float, ...] = ()

    def __post_init__(self):
        if not self.mu > 0 or self.L < self.mu:
            raise ValueError(f"need 0 < mu <= L, got mu={self.mu}, L={self.L}")
        if self.gamma < 0 or self.eta < 0 or self.sigma_g < 0 or any(s < 0 for s in self.sigma_k):
            raise ValueError("step sizes and noise levels must be nonnegative")


@dataclass(frozen=True, eq=False)
class TaskPair:
    clients: Tuple[QuadraticTask, ...]
    weights: np.ndarray
    guide: QuadraticTask

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if len(self.clients) == 0 or w.shape != (len(self.clients),):
            raise ValueError("need one weight per client task")
        if np.any(w < 0) or not math.isclose(w.sum(), 1.0, abs_tol=1e-12):
            raise ValueError("client weights must be nonnegative and sum to 1")
        dims = {t.dim for t in self.clients} | {self.guide.dim}
        if len(dims) != 1:
            raise ValueError("all tasks must share a dimension")
        object.__setattr__(self, "clients", tuple(self.clients))
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.guide.dim

    def fl_task(self) -> QuadraticTask:
        """The weighted sum of the client quadratics (itself a quadratic)."""
        A = sum(p * t.A for p, t in zip(self.weights, self.clients))
        b = sum(p * t.b for p, t in zip(self.weights, self.clients))
        c = float(sum(p * t.c for p, t in zip(self.weights, self.clients)))
        return QuadraticTask(A, b, c)

    def constants(self) -> Tuple[float, float]:
        """(mu, L) shared by every client task and the guide task."""
        curv = [t.curvature() for t in self.clients + (self.guide,)]
        return min(c[0] for c in curv), max(c[1] for c in curv)


@dataclass
class OneStepResult:
    delta_fedegg: float
    delta_fedavg: float
    epsilon_closed: float
    stderr: float
    holds: bool
    gamma_g: float = 0.0
    pi: float = 0.0


def gamma_g(fl_task: QuadraticTask, guide_task: QuadraticTask) -> float:
    """Gap between the optimal values of the federated and the guiding task."""
    return quad_optimum(fl_task)[1] - quad_optimum(guide_task)[1]


def pi(f_star: float, guide_task: QuadraticTask, w_bar: np.ndarray) -> float:
    return f_star - guide_task.loss(w_bar)


def epsilon(p: TheoryParams, gamma_g: float, pi: float) -> float:
    g, L = p.gamma, p.L
    shrink = g * (1.0 - L * g)
    return g * g * p.sigma_g ** 2 + 2.0 * (1.0 / p.mu - 2.0 * shrink) * gamma_g + 4.0 * shrink * pi


def epsilon_expanded(p: TheoryParams, gamma_g: float, pi: float) -> float:
    """Same quantity, expanded as a polynomial in gamma."""
    g, L = p.gamma, p.L
    return (
        g * g * p.sigma_g ** 2
        + (2.0 / p.mu + 4.0 * L * g * g - 4.0 * g) * gamma_g
        + (4.0 * g - 4.0 * L * g * g) * pi
    )


def pi_upper_bound(p: TheoryParams, gamma_g: float) -> float:
    """Largest guiding strength for which the correction term stays negative."""
    if not 0.0 < p.gamma < 1.0 / p.L:
        raise ValueError(f"need 0 < gamma < 1/L = {1.0 / p.L}, got {p.gamma}")
    shrink = p.gamma * (1.0 - p.L * p.gamma)
    return -(1.0 / (2.0 * p.mu * shrink) - 1.0) * gamma_g - p.gamma ** 2 * p.sigma_g ** 2 / (4.0 * shrink)


def pi_bound_coefficient(p: TheoryParams) -> float:
    """``2 mu gamma (1 - L gamma)``; it never exceeds ``mu / (2L) <= 1/2``."""
    return 2.0 * p.mu * p.gamma * (1.0 - p.L * p.gamma)


def _noise_streams(rng: np.random.Generator):
    client_rng, guide_rng = rng.spawn(2)
    return client_rng, guide_rng


def _draw_noise(rng, sigma: float, trials: int, d: int) -> np.ndarray:
    # per-coordinate sigma/sqrt(d) so the expected squared norm is sigma^2
    if sigma == 0.0:
        return np.zeros((trials, d))
    return (sigma / math.sqrt(d)) * rng.standard_normal((trials, d))


def _one_step_iterates(pair: TaskPair, p: TheoryParams, w_t: np.ndarray, trials: int, rng):
    d = pair.dim
    fl = pair.fl_task()
    g_bar = fl.grad(w_t)
    w_bar = w_t - p.eta * g_bar
    client_rng, guide_rng = _noise_streams(rng)
    sig_k = p.sigma_k or (0.0,) * len(pair.clients)
    if len(sig_k) != len(pair.clients):
        raise ValueError("need one sigma_k per client task")
    g_noise = np.zeros((trials, d))
    for pk, s in zip(pair.weights, sig_k):
        g_noise += pk * _draw_noise(client_rng, s, trials, d)
    q = pair.guide.grad(w_bar)[None, :] + _draw_noise(guide_rng, p.sigma_g, trials, d)
    fedavg = w_bar[None, :] - p.eta * g_noise
    fedegg = fedavg - p.gamma * q
    return fl, w_bar, fedavg, fedegg


def one_step_experiment(
    pair: TaskPair, p: TheoryParams, w_t: np.ndarray, trials: int, rng: np.random.Generator
) -> OneStepResult:
    """Monte Carlo estimate of both one-step squared distances, plus the closed-form correction.

    Both arms share the client-gradient noise. The guiding gradient is taken
    at the noise-free aggregate ``w_t - eta * grad f(w_t)``, which is also
    where the guiding strength is evaluated. ``holds`` compares the paired
    difference against the correction with a 3-standard-error margin.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    if p.eta > 1.0 / (4.0 * p.L):
        raise ValueError(f"eta={p.eta} exceeds 1/(4L)={1.0 / (4.0 * p.L)}")
    w_t = np.asarray(w_t, dtype=np.float64).reshape(-1)
    fl, w_bar, fedavg, fedegg = _one_step_iterates(pair, p, w_t, trials, rng)
    w_star, f_star = quad_optimum(fl)
    d_avg = np.sum((fedavg - w_star) ** 2, axis=1)
    d_egg = np.sum((fedegg - w_star) ** 2, axis=1)
    diff = d_egg - d_avg
    stderr = float(diff.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    gg = f_star - quad_optimum(pair.guide)[1]
    pv = pi(f_star, pair.guide, w_bar)
    eps = epsilon(p, gg, pv)
    holds = bool(diff.mean() <= eps + 3.0 * stderr)
    return OneStepResult(float(d_egg.mean()), float(d_avg.mean()), eps, stderr, holds, gg, pv)


def consistency_check(
    pair: TaskPair, p: TheoryParams, w_t: np.ndarray, rng: np.random.Generator, trials: int = 16
) -> bool:
    """True iff the guided and plain one-step iterates coincide bit for bit."""
    if p.sigma_g != 0.0:
        raise ValueError("consistency check needs sigma_g = 0")
    _, _, fedavg, fedegg = _one_step_iterates(pair, p, np.asarray(w_t, dtype=np.float64), trials, rng)
    return fedavg.tobytes() == fedegg.tobytes()


def running_example(gamma: float = 0.1, eta: float = 0.1, sigma_g: float = 0.0) -> Tuple[TaskPair, TheoryParams]:
    """Clients ``(w-1)^2/2`` and ``(w+1)^2/2`` with equal weight, guide ``(w-2)^2/2``."""
    one = np.eye(1)
    pair = TaskPair(
        (QuadraticTask.from_optimum(one, [1.0]), QuadraticTask.from_optimum(one, [-1.0])),
        np.array([0.5, 0.5]),
        QuadraticTask.from_optimum(one, [2.0]),
    )
    return pair, TheoryParams(mu=1.0, L=1.0, gamma=gamma, eta=eta, sigma_g=sigma_g)


def random_pd(rng: np.random.Generator, d: int, lo: float = 0.1, hi: float = 10.0) -> np.ndarray:
    """Random SPD matrix with log-uniform eigenvalues in ``[lo, hi]``."""
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    Q = Q * np.sign(np.diag(R))
    ev = np.exp(rng.uniform(math.log(lo), math.log(hi), size=d))
    A = (Q * ev) @ Q.T
    return 0.5 * (A + A.T)


def random_instance(
    rng: np.random.Generator,
    d: int,
    num_clients: int = 3,
    calibrate_guide: bool = True,
    sigma_g: float = 0.0,
) -> Tuple[TaskPair, TheoryParams, np.ndarray]:
    """Random strongly convex instance with admissible step sizes.

    Client tasks have minimum value 0 at random points. With
    ``calibrate_guide`` the guide's constant is chosen so that the guide loss
    at the federated optimum equals the federated optimal value; otherwise the
    guide also has minimum value 0.
    """
    clients = tuple(
        QuadraticTask.from_optimum(random_pd(rng, d), 2.0 * rng.standard_normal(d)) for _ in range(num_clients)
    )
    weights = rng.dirichlet(np.ones(num_clients))
    A_g = random_pd(rng, d)
    w_g = 2.0 * rng.standard_normal(d)
    guide = QuadraticTask.from_optimum(A_g, w_g)
    if calibrate_guide:
        fl = TaskPair(clients, weights, guide).fl_task()
        w_star, f_star = quad_optimum(fl)
        guide = QuadraticTask(guide.A, guide.b, guide.c + f_star - guide.loss(w_star))
    pair = TaskPair(clients, weights, guide)
    mu, L = pair.constants()
    eta = rng.uniform(0.0, 1.0 / (4.0 * L))
    gamma = (1.0 - rng.uniform(0.0, 1.0)) / (2.0 * L)  # in (0, 1/(2L)]
    w_t = 3.0 * rng.standard_normal(d)
    return pair, TheoryParams(mu=mu, L=L, gamma=gamma, eta=eta, sigma_g=sigma_g), w_t


def verify_instances(
    n_instances: int, seed: int, dims: Sequence[int] = (1, 2, 10), calibrate_guide: bool = True, atol: float = 1e-9
) -> List[dict]:
    """Noiseless check of the one-step inequality on ``n_instances`` random instances."""
    rows = []
    for i in range(n_instances):
        rng = derive_stream(seed, "theory-instance", i, 0)
        d = dims[i % len(dims)]
        pair, p, w_t = random_instance(rng, d, calibrate_guide=calibrate_guide)
        res = one_step_experiment(pair, p, w_t, 1, rng)
        rows.append(
            dict(
                instance_id=i, d=d, mu=p.mu, L=p.L, eta=p.eta, gamma=p.gamma, sigma_g=p.sigma_g,
                gamma_g=res.gamma_g, pi=res.pi, epsilon=res.epsilon_closed,
                delta_fedegg=res.delta_fedegg, delta_fedavg=res.delta_fedavg, stderr=res.stderr,
                holds=bool(res.delta_fedegg <= res.delta_fedavg + res.epsilon_closed + atol),
                epsilon_expanded=epsilon_expanded(p, res.gamma_g, res.pi),
            )
        )
    return rows


def verify_running_example(sigmas: Sequence[float], trials: int, seed: int) -> List[dict]:
    """Stochastic check on the 1-D running example, one row per guiding-noise level."""
    rows = []
    for j, s in enumerate(sigmas):
        pair, p = running_example(sigma_g=s)
        res = one_step_experiment(pair, p, np.zeros(1), trials, derive_stream(seed, "theory-running", j, 0))
        rows.append(
            dict(
                instance_id=f"running-{j}", d=1, mu=p.mu, L=p.L, eta=p.eta, gamma=p.gamma, sigma_g=s,
                gamma_g=res.gamma_g, pi=res.pi, epsilon=res.epsilon_closed,
                delta_fedegg=res.delta_fedegg, delta_fedavg=res.delta_fedavg, stderr=res.stderr,
                holds=res.holds,
            )
        )
    return rows
