"""Round-by-round federated simulation with an optional server-side guiding task.

A run has two phases. When guidance is configured, phase 1 builds the
guiding set, computes each client's log-similarity to it at the initial
model, turns those into the gate threshold, and records the initial guiding
loss. Phase 2 repeats: sample clients, run local updates, aggregate, smooth
the client loss, and, if the log-loss-ratio gate is open, take guiding
steps on the aggregate before it becomes the next global model.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .data import (
    MODE_OVERLAP,
    Dataset,
    GuidingSetSpec,
    build_guiding_set,
    dirichlet_partition,
    iid_partition,
    load_cifar10_bin,
    load_feature_file,
    sample_mixture_model,
)
from .guidance import (
    GuidanceConfig,
    GuidanceState,
    client_mean_feature,
    gate_open,
    guiding_step,
    llr,
    tau_k,
    tau_threshold,
    update_momentum_loss,
)
from .numerics import derive_stream
from .objectives import (
    DatasetObjective,
    LogRegTask,
    MlpTask,
    Objective,
    QuadraticObjective,
    init_params,
)
from .strategies import (
    ClientUpdate,
    StrategyConfig,
    aggregate_fednova,
    aggregate_mean,
    local_update_prox,
    local_update_scaffold,
    local_update_sgd,
    sample_clients,
    scaffold_server_update,
)

__all__ = [
    "METRICS_HEADER",
    "DataConfig",
    "ModelConfig",
    "GuideSetConfig",
    "SimulationConfig",
    "RoundMetrics",
    "Federation",
    "Simulation",
    "build_federation",
    "quadratic_federation",
    "run_simulation",
    "run_offline_pretrain",
    "evaluate",
    "metrics_to_csv",
    "write_metrics_csv",
    "read_metrics_csv",
    "tail_score",
]

METRICS_HEADER = (
    "round", "mean_local_loss", "loss_c", "loss_g", "llr", "tau",
    "gate_open", "guide_steps", "test_loss", "test_acc", "wall_ms",
)


@dataclass(frozen=True)
class DataConfig:
    """Where client, test and guiding-pool data come from.

    ``synthetic`` draws a Gaussian mixture; ``features`` reads FEDF files;
    ``cifar10`` reads binary batches (``train_path`` may list several,
    comma-separated). ``guide_path`` is the candidate pool for non-synthetic
    sources.
    """

    source: str = "synthetic"
    classes: int = 10
    dim: int = 32
    train_per_class: int = 500
    test_per_class: int = 100
    spread: float = 1.0
    shift: float = 1.0
    train_path: str = ""
    test_path: str = ""
    guide_path: str = ""

    def __post_init__(self):
        if self.source not in ("synthetic", "features", "cifar10"):
            raise ValueError(f"unknown data source {self.source!r}")
        if self.source == "synthetic":
            if self.classes < 2 or self.dim < 1 or self.train_per_class < 1 or self.test_per_class < 1:
                raise ValueError("synthetic data needs classes >= 2 and positive sizes")
        elif not self.train_path or not self.test_path:
            raise ValueError(f"data source {self.source!r} needs train_path and test_path")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "logreg"
    hidden: int = 32

    def __post_init__(self):
        if self.kind not in ("logreg", "mlp"):
            raise ValueError(f"unknown model {self.kind!r}")
        if self.hidden < 1:
            raise ValueError("hidden must be positive")


@dataclass(frozen=True)
class GuideSetConfig:
    """``mode`` is LH/MH/HH, or ``identical`` (the pooled client data itself).
    ``overlap`` overrides the mode's overlap fraction when set."""

    mode: str = "LH"
    overlap: Optional[float] = None
    size_per_class: Optional[int] = None

    def __post_init__(self):
        if self.mode not in (*MODE_OVERLAP, "identical"):
            raise ValueError(f"unknown guiding-set mode {self.mode!r}")
        if self.overlap is not None and not 0.0 <= self.overlap <= 1.0:
            raise ValueError("overlap must lie in [0, 1]")
        if self.size_per_class is not None and self.size_per_class < 1:
            raise ValueError("size_per_class must be positive")


@dataclass(frozen=True)
class SimulationConfig:
    num_clients: int = 100
    sampled: int = 20
    rounds: int = 300
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    guidance: Optional[GuidanceConfig] = None
    guide_set: GuideSetConfig = field(default_factory=GuideSetConfig)
    alpha: Optional[float] = 0.1  # None: IID split
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    eval_every: int = 1
    tail_window: int = 50
    workers: int = 1
    record_wall_time: bool = False

    def __post_init__(self):
        if not 1 <= self.sampled <= self.num_clients:
            raise ValueError(f"need 1 <= sampled <= clients, got {self.sampled} of {self.num_clients}")
        if self.rounds < 0:
            raise ValueError("rounds must be nonnegative")
        if self.alpha is not None and not self.alpha > 0:
            raise ValueError("alpha must be positive (or unset for IID)")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        if self.eval_every < 1 or self.tail_window < 1 or self.workers < 1:
            raise ValueError("eval_every, tail_window and workers must be positive")

    def replace(self, **changes) -> "SimulationConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class RoundMetrics:
    round: int
    mean_local_loss: float
    loss_c: Optional[float] = None
    loss_g: Optional[float] = None
    llr: Optional[float] = None
    tau: Optional[float] = None
    gate_open: Optional[bool] = None
    guide_steps: Optional[int] = None
    test_loss: Optional[float] = None
    test_acc: Optional[float] = None
    wall_ms: Optional[float] = None

    def as_row(self) -> List[str]:
        out = []
        for name in METRICS_HEADER:
            v = getattr(self, name)
            if v is None:
                out.append("")
            elif isinstance(v, bool):
                out.append("1" if v else "0")
            elif isinstance(v, int):
                out.append(str(v))
            else:
                out.append(repr(float(v)))
        return out


@dataclass
class Federation:
    """The materialised problem a simulation runs on."""

    clients: List[Objective]
    w0: np.ndarray
    guide: Optional[Objective] = None
    guide_data: Optional[Dataset] = None
    task: object = None
    client_data: Optional[List[Dataset]] = None
    test_set: Optional[Dataset] = None

    def evaluate(self, w: np.ndarray) -> Tuple[Optional[float], Optional[float]]:
        if self.test_set is None or self.task is None:
            return None, None
        return evaluate(w, self.task, self.test_set)


def evaluate(w: np.ndarray, task, test_set: Dataset) -> Tuple[float, float]:
    """Mean cross-entropy and accuracy; argmax ties go to the lowest class id."""
    if len(test_set) == 0:
        raise ValueError("empty test set")
    loss = DatasetObjective(task, test_set.features, test_set.labels).loss(w)
    pred = np.argmax(task.logits(w, test_set.features), axis=1)
    return loss, float(np.mean(pred == test_set.labels))


def _load_many(paths: str, loader) -> Dataset:
    parts = [loader(p.strip()) for p in paths.split(",") if p.strip()]
    if len(parts) == 1:
        return parts[0]
    return Dataset(
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.labels for p in parts]),
        max(p.num_classes for p in parts),
    )


def _load_pool(path: str) -> Dataset:
    return load_cifar10_bin(path) if path.endswith(".bin") else load_feature_file(path)


def _guide_size_per_class(cfg: SimulationConfig, n_train: int, k: int) -> int:
    if cfg.guide_set.size_per_class is not None:
        return cfg.guide_set.size_per_class
    # twice a mean client's data, spread over the classes
    return max(1, math.ceil(2.0 * n_train / cfg.num_clients / k))


def build_federation(cfg: SimulationConfig) -> Federation:
    seed = cfg.seed
    dc = cfg.data
    mixture = None
    if dc.source == "synthetic":
        mixture = sample_mixture_model(dc.classes, dc.dim, dc.spread, dc.shift, derive_stream(seed, "data-model"))
        train = mixture.sample(dc.train_per_class, derive_stream(seed, "data-train"))
        test = mixture.sample(dc.test_per_class, derive_stream(seed, "data-test"))
    else:
        loader = load_cifar10_bin if dc.source == "cifar10" else load_feature_file
        train = _load_many(dc.train_path, loader)
        test = _load_many(dc.test_path, loader)
        if test.dim != train.dim:
            raise ValueError("train and test data differ in feature dimension")
    k = max(train.num_classes, test.num_classes)
    if cfg.alpha is None:
        part = iid_partition(train.labels, cfg.num_clients, derive_stream(seed, "partition"))
    else:
        part = dirichlet_partition(train.labels, cfg.num_clients, cfg.alpha, derive_stream(seed, "partition"))
    if cfg.model.kind == "logreg":
        task = LogRegTask(k, train.dim)
    else:
        task = MlpTask(train.dim, cfg.model.hidden, k)
    client_data = [train.subset(idx) for idx in part.client_indices]
    clients = [DatasetObjective(task, d.features, d.labels) for d in client_data]
    w0 = init_params(task, derive_stream(seed, "init"))

    guide = guide_data = None
    if cfg.guidance is not None:
        gs = cfg.guide_set
        if gs.mode == "identical":
            guide_data = train
        else:
            overlap = gs.overlap if gs.overlap is not None else MODE_OVERLAP[gs.mode]
            if mixture is not None:
                source = mixture
            elif dc.guide_path:
                source = _load_pool(dc.guide_path)
            else:
                raise ValueError("a guiding set from non-synthetic data needs data.guide_path")
            spec = GuidingSetSpec(overlap, _guide_size_per_class(cfg, len(train), k), source)
            guide_data = build_guiding_set(spec, train, derive_stream(seed, "guide-set"))
        guide = DatasetObjective(task, guide_data.features, guide_data.labels)
    return Federation(clients, w0, guide, guide_data, task, client_data, test)


def quadratic_federation(pair, w0, sigma_client: float = 0.0, sigma_guide: float = 0.0) -> Federation:
    """Federation over quadratic client tasks (phase 1 then needs ``tau_override``)."""
    clients = [QuadraticObjective(t, sigma_client) for t in pair.clients]
    return Federation(clients, np.array(w0, dtype=np.float64), guide=QuadraticObjective(pair.guide, sigma_guide))


RoundHook = Callable[[int, np.ndarray, np.ndarray], None]


class Simulation:
    """Mutable server state for one run. Single-threaded; client work fans out to a pool."""

    def __init__(self, cfg: SimulationConfig, fed: Federation, on_round: Optional[RoundHook] = None):
        if len(fed.clients) != cfg.num_clients:
            raise ValueError(f"config has {cfg.num_clients} clients, federation has {len(fed.clients)}")
        if cfg.guidance is not None and fed.guide is None:
            raise ValueError("guidance configured but the federation has no guiding task")
        self.cfg = cfg
        self.fed = fed
        self.on_round = on_round
        self.w = np.array(fed.w0, dtype=np.float64)
        self.guidance: Optional[GuidanceState] = None
        self.c_global = self.c_clients = None
        if cfg.strategy.kind == "scaffold":
            self.c_global = np.zeros_like(self.w)
            self.c_clients = [np.zeros_like(self.w) for _ in range(cfg.num_clients)]

    def phase1(self) -> None:
        g = self.cfg.guidance
        if g is None:
            return
        if g.tau_override is not None:
            tau, taus = float(g.tau_override), ()
        else:
            if self.fed.client_data is None or self.fed.guide_data is None:
                raise ValueError("threshold from features needs client and guiding data; set tau_override")
            guide_feat = client_mean_feature(self.fed.task, self.w, self.fed.guide_data)
            # every client takes part, not only future participants
            taus = tuple(
                tau_k(client_mean_feature(self.fed.task, self.w, d), guide_feat, g) for d in self.fed.client_data
            )
            tau = tau_threshold(taus, g)
        self.guidance = GuidanceState(
            tau=tau, loss_g=self.fed.guide.loss(self.w), guide_data=self.fed.guide_data, client_taus=taus
        )

    def _client_update(self, k: int, t: int, eta: float) -> ClientUpdate:
        cfg = self.cfg.strategy
        rng = derive_stream(self.cfg.seed, "client", t, k)
        obj = self.fed.clients[k]
        if cfg.kind == "fedprox":
            return local_update_prox(self.w, obj, cfg, rng, eta, k)
        if cfg.kind == "scaffold":
            return local_update_scaffold(self.w, obj, cfg, self.c_global, self.c_clients[k], rng, eta, k)
        return local_update_sgd(self.w, obj, cfg, rng, eta, k)

    def _aggregate(self, updates: List[ClientUpdate]) -> np.ndarray:
        kind = self.cfg.strategy.kind
        if kind == "fednova":
            return aggregate_fednova(updates, self.w, [u.steps_taken for u in updates])
        if kind == "scaffold":
            for u in updates:
                self.c_clients[u.client_id] = self.c_clients[u.client_id] + u.control_delta
            self.c_global = scaffold_server_update(
                self.c_global, [u.control_delta for u in updates], self.cfg.num_clients
            )
        return aggregate_mean(updates)

    def run_round(self, t: int, pool: Optional[ThreadPoolExecutor] = None) -> RoundMetrics:
        start = time.perf_counter()
        cfg = self.cfg
        eta = cfg.strategy.eta_schedule(t)
        chosen = sample_clients(cfg.num_clients, cfg.sampled, derive_stream(cfg.seed, "sample", t))
        if pool is None:
            updates = [self._client_update(k, t, eta) for k in chosen]
        else:
            updates = list(pool.map(lambda k: self._client_update(k, t, eta), chosen))
        w_bar = self._aggregate(updates)
        mean_loss = math.fsum(u.final_local_loss for u in updates) / len(updates)
        m = RoundMetrics(round=t, mean_local_loss=mean_loss)

        w_pre_guide = w_bar
        g = cfg.guidance
        if g is not None:
            st = self.guidance
            st.loss_c = update_momentum_loss(st.loss_c, mean_loss, g.beta)
            ratio = llr(max(st.loss_c, g.loss_floor), max(st.loss_g, g.loss_floor), g.log_base)
            is_open = gate_open(ratio, st.tau)
            steps = 0
            if is_open:
                gamma = (g.gamma_schedule or cfg.strategy.eta_schedule)(t)
                rng = derive_stream(cfg.seed, "guide", t)
                for _ in range(g.T_g):
                    w_bar = guiding_step(w_bar, self.fed.guide, gamma, rng, g.batch_size)
                    steps += 1
                st.loss_g = self.fed.guide.loss(w_bar)
                st.steps_taken_total += steps
            m.loss_c, m.loss_g, m.llr, m.tau = st.loss_c, st.loss_g, ratio, st.tau
            m.gate_open, m.guide_steps = is_open, steps

        if self.on_round is not None:
            self.on_round(t, w_pre_guide, w_bar)
        self.w = w_bar
        if t % cfg.eval_every == 0 or t == cfg.rounds:
            m.test_loss, m.test_acc = self.fed.evaluate(self.w)
        if cfg.record_wall_time:
            m.wall_ms = 1000.0 * (time.perf_counter() - start)
        return m

    def run(self) -> List[RoundMetrics]:
        if self.cfg.rounds == 0:
            return []
        self.phase1()
        out = []
        if self.cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
                for t in range(1, self.cfg.rounds + 1):
                    out.append(self.run_round(t, pool))
        else:
            for t in range(1, self.cfg.rounds + 1):
                out.append(self.run_round(t))
        return out


def run_simulation(
    cfg: SimulationConfig, fed: Optional[Federation] = None, on_round: Optional[RoundHook] = None
) -> List[RoundMetrics]:
    """Run phase 1 (when guided) and ``cfg.rounds`` rounds; deterministic given ``cfg.seed``."""
    if cfg.rounds == 0:
        return []
    if fed is None:
        fed = build_federation(cfg)
    return Simulation(cfg, fed, on_round).run()


def run_offline_pretrain(
    cfg: SimulationConfig,
    pretrain_steps: int,
    fed: Optional[Federation] = None,
    on_round: Optional[RoundHook] = None,
) -> List[RoundMetrics]:
    """Train the initial model on the guiding data alone, then run unguided FL.

    Pretraining takes ``pretrain_steps`` full-batch gradient steps with the
    round-1 guiding step size.
    """
    g = cfg.guidance
    if g is None:
        raise ValueError("offline pretraining needs a guidance configuration")
    if pretrain_steps < 0:
        raise ValueError("pretrain_steps must be nonnegative")
    if fed is None:
        fed = build_federation(cfg)
    gamma = (g.gamma_schedule or cfg.strategy.eta_schedule)(1)
    w = np.array(fed.w0, dtype=np.float64)
    for _ in range(pretrain_steps):
        w = guiding_step(w, fed.guide, gamma)
    plain = dataclasses.replace(fed, w0=w, guide=None, guide_data=None)
    return run_simulation(cfg.replace(guidance=None), plain, on_round)


def metrics_to_csv(metrics: Sequence[RoundMetrics]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for m in metrics:
        writer.writerow(m.as_row())
    return buf.getvalue()


def write_metrics_csv(path, metrics: Sequence[RoundMetrics]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(metrics_to_csv(metrics))


def read_metrics_csv(path) -> List[dict]:
    """Rows as dicts of floats (``None`` for empty fields)."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        return [{k: (float(v) if v != "" else None) for k, v in row.items()} for row in reader]


def tail_score(metrics: Sequence[RoundMetrics], window: int, name: str = "test_acc") -> float:
    """Mean of ``name`` over the last ``window`` rounds that recorded it."""
    vals = [getattr(m, name) for m in metrics[-window:] if getattr(m, name) is not None]
    if not vals:
        return float("nan")
    return math.fsum(vals) / len(vals)
