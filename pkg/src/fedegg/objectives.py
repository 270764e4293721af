"""Task families with analytic losses and gradients.

Three families are provided: strongly convex quadratics (used by the theory
harness), multinomial logistic regression, and a one-hidden-layer tanh MLP.
Classifier parameters live in one flat vector; the layouts are documented on
each task class.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Tuple, Union

import numpy as np

__all__ = [
    "QuadraticTask",
    "LogRegTask",
    "MlpTask",
    "NoiseModel",
    "quad_loss_grad",
    "quad_optimum",
    "logreg_loss_grad",
    "mlp_loss_grad",
    "features",
    "finite_diff_grad",
    "relative_error",
    "init_params",
    "Objective",
    "DatasetObjective",
    "QuadraticObjective",
]


def _check_dim(w: np.ndarray, dim: int) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.shape[0] != dim:
        raise ValueError(f"dimension mismatch: expected {dim}, got {w.shape[0]}")
    return w


@dataclass(frozen=True, eq=False)
class QuadraticTask:
    """``loss(w) = 0.5 w^T A w - b^T w + c`` with ``A`` symmetric positive definite."""

    A: np.ndarray
    b: np.ndarray
    c: float = 0.0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if A.shape != (b.shape[0], b.shape[0]):
            raise ValueError(f"A has shape {A.shape}, b has length {b.shape[0]}")
        if not np.allclose(A, A.T, atol=1e-12, rtol=0.0):
            raise ValueError("A is not symmetric")
        A = 0.5 * (A + A.T)
        if np.linalg.eigvalsh(A)[0] <= 0.0:
            raise ValueError("A is not positive definite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", float(self.c))

    @property
    def dim(self) -> int:
        return self.b.shape[0]

    def loss(self, w: np.ndarray) -> float:
        w = _check_dim(w, self.dim)
        return float(0.5 * w @ self.A @ w - self.b @ w + self.c)

    def grad(self, w: np.ndarray) -> np.ndarray:
        w = _check_dim(w, self.dim)
        return self.A @ w - self.b

    def curvature(self) -> Tuple[float, float]:
        """(mu, L): extreme eigenvalues of ``A``."""
        ev = np.linalg.eigvalsh(self.A)
        return float(ev[0]), float(ev[-1])

    @classmethod
    def from_optimum(cls, A: np.ndarray, w_star: np.ndarray, f_star: float = 0.0) -> "QuadraticTask":
        """Build the quadratic with curvature ``A``, minimiser ``w_star`` and minimum ``f_star``."""
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        w_star = np.asarray(w_star, dtype=np.float64).reshape(-1)
        b = A @ w_star
        return cls(A, b, f_star + 0.5 * float(w_star @ b))


@dataclass(frozen=True)
class NoiseModel:
    """Per-coordinate standard deviations of additive gradient noise."""

    sigma_client: float = 0.0
    sigma_guide: float = 0.0

    def __post_init__(self):
        for name in ("sigma_client", "sigma_guide"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")


def quad_loss_grad(
    task: QuadraticTask,
    w: np.ndarray,
    sigma: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[float, np.ndarray]:
    """Exact loss, and gradient plus ``N(0, sigma^2 I)`` noise when ``sigma > 0``."""
    w = _check_dim(w, task.dim)
    loss = task.loss(w)
    grad = task.grad(w)
    if sigma > 0.0:
        if rng is None:
            raise ValueError("noisy gradient requested without a random stream")
        grad = grad + sigma * rng.standard_normal(task.dim)
    return loss, grad


def quad_optimum(task: QuadraticTask) -> Tuple[np.ndarray, float]:
    w_star = np.linalg.solve(task.A, task.b)
    f_star = task.c - 0.5 * float(task.b @ w_star)
    return w_star, f_star


def _softmax_xent(logits: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    s = ez.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = float(np.mean(np.log(s[:, 0]) - z[np.arange(n), y]))
    probs = ez / s
    probs[np.arange(n), y] -= 1.0
    return loss, probs / n


def _check_batch(X, y, input_dim: int, num_classes: int) -> Tuple[np.ndarray, np.ndarray]:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if X.shape[1] != input_dim:
        raise ValueError(f"input dimension mismatch: expected {input_dim}, got {X.shape[1]}")
    if X.shape[0] != y.shape[0]:
        raise ValueError("features and labels differ in length")
    if y.min() < 0 or y.max() >= num_classes:
        raise ValueError(f"label out of range [0, {num_classes})")
    return X, y


@dataclass(frozen=True)
class LogRegTask:
    """Softmax regression. Layout: ``W`` (k x d, row-major) then bias ``b`` (k)."""

    num_classes: int
    input_dim: int

    def __post_init__(self):
        if self.num_classes < 2 or self.input_dim < 1:
            raise ValueError("need num_classes >= 2 and input_dim >= 1")

    @property
    def dim(self) -> int:
        return self.num_classes * (self.input_dim + 1)

    def unpack(self, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        w = _check_dim(w, self.dim)
        k, d = self.num_classes, self.input_dim
        return w[: k * d].reshape(k, d), w[k * d :]

    def logits(self, w: np.ndarray, X: np.ndarray) -> np.ndarray:
        W, b = self.unpack(w)
        return np.atleast_2d(X) @ W.T + b


def logreg_loss_grad(task: LogRegTask, w: np.ndarray, X, y) -> Tuple[float, np.ndarray]:
    X, y = _check_batch(X, y, task.input_dim, task.num_classes)
    W, b = task.unpack(w)
    loss, G = _softmax_xent(X @ W.T + b, y)
    return loss, np.concatenate([(G.T @ X).reshape(-1), G.sum(axis=0)])


@dataclass(frozen=True)
class MlpTask:
    """d -> h (tanh) -> k. Layout: ``W1`` (h x d), ``b1`` (h), ``W2`` (k x h), ``b2`` (k)."""

    input_dim: int
    hidden: int
    num_classes: int

    def __post_init__(self):
        if self.num_classes < 2 or self.input_dim < 1 or self.hidden < 1:
            raise ValueError("need num_classes >= 2, input_dim >= 1, hidden >= 1")

    @property
    def dim(self) -> int:
        d, h, k = self.input_dim, self.hidden, self.num_classes
        return h * d + h + k * h + k

    def unpack(self, w: np.ndarray):
        w = _check_dim(w, self.dim)
        d, h, k = self.input_dim, self.hidden, self.num_classes
        i = 0
        W1 = w[i : i + h * d].reshape(h, d)
        i += h * d
        b1 = w[i : i + h]
        i += h
        W2 = w[i : i + k * h].reshape(k, h)
        i += k * h
        b2 = w[i : i + k]
        return W1, b1, W2, b2

    def hidden_activations(self, w: np.ndarray, X: np.ndarray) -> np.ndarray:
        W1, b1, _, _ = self.unpack(w)
        return np.tanh(np.atleast_2d(X) @ W1.T + b1)

    def logits(self, w: np.ndarray, X: np.ndarray) -> np.ndarray:
        _, _, W2, b2 = self.unpack(w)
        return self.hidden_activations(w, X) @ W2.T + b2


def mlp_loss_grad(task: MlpTask, w: np.ndarray, X, y) -> Tuple[float, np.ndarray]:
    X, y = _check_batch(X, y, task.input_dim, task.num_classes)
    W1, b1, W2, b2 = task.unpack(w)
    H = np.tanh(X @ W1.T + b1)
    loss, G = _softmax_xent(H @ W2.T + b2, y)
    dZ = (G @ W2) * (1.0 - H * H)
    grad = np.concatenate(
        [(dZ.T @ X).reshape(-1), dZ.sum(axis=0), (G.T @ H).reshape(-1), G.sum(axis=0)]
    )
    return loss, grad


Task = Union[QuadraticTask, LogRegTask, MlpTask]


def features(task: Task, w: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Penultimate representation of ``X`` (one row per example).

    Logistic regression and quadratics have no hidden layer, so their features
    are the raw inputs; the MLP exposes its tanh activations.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if isinstance(task, MlpTask):
        if X.shape[1] != task.input_dim:
            raise ValueError(f"input dimension mismatch: expected {task.input_dim}, got {X.shape[1]}")
        return task.hidden_activations(w, X)
    expected = task.input_dim if isinstance(task, LogRegTask) else task.dim
    if X.shape[1] != expected:
        raise ValueError(f"input dimension mismatch: expected {expected}, got {X.shape[1]}")
    return X.copy()


def finite_diff_grad(loss_fn: Callable[[np.ndarray], float], w: np.ndarray, h: float = 1e-5) -> np.ndarray:
    if h <= 0:
        raise ValueError("step must be positive")
    w = np.array(w, dtype=np.float64).reshape(-1)
    g = np.empty_like(w)
    for i in range(w.shape[0]):
        orig = w[i]
        w[i] = orig + h
        up = loss_fn(w)
        w[i] = orig - h
        down = loss_fn(w)
        w[i] = orig
        g[i] = (up - down) / (2.0 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-300)
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b))) / scale


def init_params(task: Task, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Starting point for training: zeros, except MLP weights (symmetric zeros never train)."""
    w = np.zeros(task.dim)
    if isinstance(task, MlpTask):
        if rng is None:
            raise ValueError("MLP initialisation needs a random stream")
        W1, _, W2, _ = task.unpack(w)
        W1[...] = rng.standard_normal(W1.shape) / np.sqrt(task.input_dim)
        W2[...] = rng.standard_normal(W2.shape) / np.sqrt(task.hidden)
    return w


class Objective(Protocol):
    """What the strategies and the guidance step need from a local task."""

    dim: int

    def loss(self, w: np.ndarray) -> float: ...

    def loss_grad(self, w: np.ndarray) -> Tuple[float, np.ndarray]: ...

    def stochastic_grad(self, w: np.ndarray, rng: np.random.Generator, batch_size: int) -> np.ndarray: ...


class DatasetObjective:
    """Mean cross-entropy of a classifier over a fixed set of examples."""

    def __init__(self, task: Union[LogRegTask, MlpTask], X: np.ndarray, y: np.ndarray):
        self.task = task
        self.X, self.y = _check_batch(X, y, task.input_dim, task.num_classes)
        self.dim = task.dim
        self._fn = logreg_loss_grad if isinstance(task, LogRegTask) else mlp_loss_grad

    @property
    def size(self) -> int:
        return self.X.shape[0]

    def loss_grad(self, w):
        return self._fn(self.task, w, self.X, self.y)

    def loss(self, w) -> float:
        return self.loss_grad(w)[0]

    def stochastic_grad(self, w, rng, batch_size):
        # a batch at least as large as the set is the full set, and draws nothing
        if batch_size >= self.size:
            return self.loss_grad(w)[1]
        idx = rng.choice(self.size, size=batch_size, replace=False)
        return self._fn(self.task, w, self.X[idx], self.y[idx])[1]


class QuadraticObjective:
    """A quadratic with optional additive Gaussian gradient noise."""

    def __init__(self, task: QuadraticTask, sigma: float = 0.0):
        if not np.isfinite(sigma) or sigma < 0:
            raise ValueError("sigma must be finite and nonnegative")
        self.task = task
        self.sigma = float(sigma)
        self.dim = task.dim

    def loss_grad(self, w):
        return quad_loss_grad(self.task, w)

    def loss(self, w) -> float:
        return self.task.loss(w)

    def stochastic_grad(self, w, rng, batch_size):
        return quad_loss_grad(self.task, w, self.sigma, rng)[1]
