"""Datasets, non-IID partitioning, guiding-set construction and file loaders."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .numerics import cosine_similarity

__all__ = [
    "FormatError",
    "Dataset",
    "Partition",
    "MixtureModel",
    "GuidingSetSpec",
    "MODE_OVERLAP",
    "sample_mixture_model",
    "gen_gaussian_mixture",
    "dirichlet_partition",
    "iid_partition",
    "max_class_share",
    "select_similar_classes",
    "build_guiding_set",
    "load_cifar10_bin",
    "load_feature_file",
    "write_feature_file",
]

CIFAR_RECORD = 1 + 3072
FEDF_MAGIC = b"FEDF"
FEDF_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    """Malformed input file."""


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if X.shape[0] < 1:
            raise ValueError("dataset must hold at least one example")
        if X.shape[0] != y.shape[0]:
            raise ValueError("features and labels differ in length")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(X)):
            raise ValueError("features contain NaN or Inf")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def class_means(self) -> dict:
        """Mean feature vector of every class present, keyed by label."""
        return {int(c): self.features[self.labels == c].mean(axis=0) for c in np.unique(self.labels)}

    def equals(self, other: "Dataset") -> bool:
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.features, other.features)
        )


@dataclass(frozen=True, eq=False)
class Partition:
    client_indices: tuple
    weights: np.ndarray

    @classmethod
    def from_indices(cls, lists: Sequence[Sequence[int]]) -> "Partition":
        idx = tuple(np.asarray(sorted(l), dtype=np.int64) for l in lists)
        sizes = np.array([len(i) for i in idx], dtype=np.float64)
        return cls(idx, sizes / sizes.sum())

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> np.ndarray:
        return np.array([len(i) for i in self.client_indices])

    def is_exact_cover(self, n: int) -> bool:
        allidx = np.concatenate(self.client_indices) if self.client_indices else np.array([], int)
        return allidx.shape[0] == n and np.array_equal(np.sort(allidx), np.arange(n))


@dataclass(frozen=True, eq=False)
class MixtureModel:
    """Isotropic Gaussian class-conditionals ``N(means[c], spread^2 I)``.

    ``shift`` is the scale used to draw class means, kept so that fresh
    (non-shared) classes for a guiding set come from the same family.
    """

    means: np.ndarray
    spread: float
    shift: float

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, n_per_class: int, rng: np.random.Generator, means: Optional[np.ndarray] = None) -> Dataset:
        means = self.means if means is None else means
        k, d = means.shape
        noise = rng.standard_normal((k, n_per_class, d))
        X = (means[:, None, :] + self.spread * noise).reshape(k * n_per_class, d)
        y = np.repeat(np.arange(k), n_per_class)
        return Dataset(X, y, self.num_classes)


def _draw_means(k: int, d: int, shift: float, rng: np.random.Generator) -> np.ndarray:
    # folded normals: nonnegative means, like rectified network features
    return shift * np.abs(rng.standard_normal((k, d)))


def sample_mixture_model(k: int, d: int, spread: float, shift: float, rng: np.random.Generator) -> MixtureModel:
    if k < 2 or d < 1:
        raise ValueError("need k >= 2 classes and d >= 1")
    if spread < 0 or shift < 0:
        raise ValueError("spread and shift must be nonnegative")
    return MixtureModel(_draw_means(k, d, shift, rng), float(spread), float(shift))


def gen_gaussian_mixture(
    k: int, d: int, n_per_class: int, spread: float, shift: float, rng: np.random.Generator
) -> Dataset:
    if n_per_class < 1:
        raise ValueError("n_per_class must be positive")
    return sample_mixture_model(k, d, spread, shift, rng).sample(n_per_class, rng)


def _largest_remainder(total: int, props: np.ndarray) -> np.ndarray:
    raw = props * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # ties go to the lower client id
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(labels, num_clients: int, alpha: float, rng: np.random.Generator) -> Partition:
    """Split indices so each class is spread over clients by ``Dir(alpha * 1_N)``.

    Clients left empty receive one sample from the currently largest client.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n = labels.shape[0]
    if num_clients < 1:
        raise ValueError("need at least one client")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if num_clients > n:
        raise ValueError(f"{num_clients} clients but only {n} samples")
    lists: List[List[int]] = [[] for _ in range(num_clients)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        q = rng.dirichlet(np.full(num_clients, alpha))
        if not np.all(np.isfinite(q)) or q.sum() <= 0:
            # underflow at tiny alpha: all mass on one client
            q = np.zeros(num_clients)
            q[rng.integers(num_clients)] = 1.0
        counts = _largest_remainder(idx.shape[0], q / q.sum())
        start = 0
        for k, cnt in enumerate(counts):
            lists[k].extend(idx[start : start + cnt].tolist())
            start += cnt
    for k in range(num_clients):
        if not lists[k]:
            donor = max(range(num_clients), key=lambda j: (len(lists[j]), -j))
            lists[k].append(lists[donor].pop())
    return Partition.from_indices(lists)


def iid_partition(labels, num_clients: int, rng: np.random.Generator) -> Partition:
    n = np.asarray(labels).reshape(-1).shape[0]
    if not 1 <= num_clients <= n:
        raise ValueError(f"need 1 <= clients <= {n}")
    perm = rng.permutation(n)
    return Partition.from_indices(np.array_split(perm, num_clients))


def max_class_share(labels, partition: Partition) -> np.ndarray:
    """Per-client fraction of samples belonging to the client's most common class."""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.empty(partition.num_clients)
    for k, idx in enumerate(partition.client_indices):
        out[k] = np.bincount(labels[idx]).max() / len(idx)
    return out


MODE_OVERLAP = {"LH": 1.0, "MH": 0.5, "HH": 0.0}


@dataclass(frozen=True)
class GuidingSetSpec:
    """How to build the server's guiding data.

    ``overlap`` is the fraction of guiding classes that share the clients'
    class-conditional distributions. ``source`` is either the generative
    mixture behind the client data, or a pool of candidate examples (e.g. a
    feature file) from which whole classes are picked by similarity.
    """

    overlap: float
    size_per_class: int
    source: Union[MixtureModel, Dataset]
    num_guide_classes: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError("overlap must lie in [0, 1]")
        if self.size_per_class < 1:
            raise ValueError("size_per_class must be positive")

    @classmethod
    def from_mode(cls, mode: str, size_per_class: int, source, **kw) -> "GuidingSetSpec":
        try:
            overlap = MODE_OVERLAP[mode.upper()]
        except KeyError:
            raise ValueError(f"unknown heterogeneity mode {mode!r}; expected LH, MH or HH") from None
        return cls(overlap, size_per_class, source, **kw)


def select_similar_classes(client_class_means, candidate_class_means, top_k: int) -> List[int]:
    """Rank candidates by their best cosine similarity to any client class mean.

    Ties are broken by ascending candidate id.
    """
    if top_k > len(candidate_class_means):
        raise ValueError(f"top_k={top_k} exceeds {len(candidate_class_means)} candidates")
    scores = [max(cosine_similarity(m, c) for m in client_class_means) for c in candidate_class_means]
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], j))
    return order[:top_k]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def build_guiding_set(spec: GuidingSetSpec, client_data: Dataset, rng: np.random.Generator) -> Dataset:
    if isinstance(spec.source, MixtureModel):
        return _guide_from_mixture(spec, client_data, rng)
    return _guide_from_pool(spec, client_data, rng)


def _guide_from_mixture(spec: GuidingSetSpec, client_data: Dataset, rng) -> Dataset:
    model = spec.source
    k = model.num_classes
    if client_data.num_classes != k or client_data.dim != model.dim:
        raise ValueError("mixture source does not match the client data")
    n_shared = _round_half_up(spec.overlap * k)
    # draw order is fixed so LH/MH/HH built from one stream are nested
    order = rng.permutation(k)
    fresh = _draw_means(k, model.dim, model.shift, rng)
    shared = np.zeros(k, dtype=bool)
    shared[order[:n_shared]] = True
    means = np.where(shared[:, None], model.means, fresh)
    return model.sample(spec.size_per_class, rng, means=means)


def _guide_from_pool(spec: GuidingSetSpec, client_data: Dataset, rng) -> Dataset:
    pool = spec.source
    if pool.dim != client_data.dim:
        raise ValueError("candidate pool and client data differ in feature dimension")
    client_means = client_data.class_means()
    client_ids = sorted(client_means)
    client_vecs = [client_means[c] for c in client_ids]
    pool_means = pool.class_means()
    cand_ids = sorted(pool_means)
    cand_vecs = [pool_means[c] for c in cand_ids]
    g = spec.num_guide_classes or len(client_ids)
    if g > len(cand_ids):
        raise ValueError(f"{g} guiding classes requested, pool has {len(cand_ids)}")
    ranking = select_similar_classes(client_vecs, cand_vecs, len(cand_vecs))
    n_shared = _round_half_up(spec.overlap * g)
    picked = ranking[:n_shared] + ranking[::-1][: g - n_shared]
    X_parts, y_parts = [], []
    for j in picked:
        members = np.flatnonzero(pool.labels == cand_ids[j])
        if spec.size_per_class > members.shape[0]:
            raise ValueError(
                f"class {cand_ids[j]} has {members.shape[0]} examples, {spec.size_per_class} requested"
            )
        take = rng.choice(members, size=spec.size_per_class, replace=False)
        # relabel into the client label space by nearest client class
        sims = [cosine_similarity(v, cand_vecs[j]) for v in client_vecs]
        label = client_ids[int(np.argmax(sims))]
        X_parts.append(pool.features[np.sort(take)])
        y_parts.append(np.full(spec.size_per_class, label))
    return Dataset(np.concatenate(X_parts), np.concatenate(y_parts), client_data.num_classes)


def load_cifar10_bin(path: Union[str, Path]) -> Dataset:
    """Read a CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes."""
    raw = np.fromfile(str(path), dtype=np.uint8)
    if raw.shape[0] == 0:
        raise FormatError(f"{path}: empty file")
    if raw.shape[0] % CIFAR_RECORD:
        raise FormatError(f"{path}: length {raw.shape[0]} is not a multiple of {CIFAR_RECORD}")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"{path}: label {labels.max()} out of range")
    return Dataset(rec[:, 1:].astype(np.float64) / 255.0, labels, 10)


def _fedf_dtype(d: int) -> np.dtype:
    return np.dtype([("label", "<u2"), ("x", "<f4", (d,))])


def load_feature_file(path: Union[str, Path]) -> Dataset:
    """Read a ``FEDF`` file: magic, u32 n/d/k, then n records of (u16 label, d x f32)."""
    blob = Path(path).read_bytes()
    if len(blob) < FEDF_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, n, d, k = FEDF_HEADER.unpack_from(blob)
    if magic != FEDF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if n == 0 or d == 0 or k == 0:
        raise FormatError(f"{path}: header declares n={n}, d={d}, k={k}")
    dt = _fedf_dtype(d)
    if len(blob) != FEDF_HEADER.size + n * dt.itemsize:
        raise FormatError(f"{path}: header declares {n}x{d} records, file holds {len(blob) - FEDF_HEADER.size} bytes")
    rec = np.frombuffer(blob, dtype=dt, count=n, offset=FEDF_HEADER.size)
    labels = rec["label"].astype(np.int64)
    if labels.max() >= k:
        raise FormatError(f"{path}: label {labels.max()} >= k={k}")
    return Dataset(rec["x"].astype(np.float64), labels, int(k))


def write_feature_file(path: Union[str, Path], data: Dataset) -> None:
    dt = _fedf_dtype(data.dim)
    rec = np.empty(len(data), dtype=dt)
    rec["label"] = data.labels
    rec["x"] = data.features
    with open(path, "wb") as fh:
        fh.write(FEDF_HEADER.pack(FEDF_MAGIC, len(data), data.dim, data.num_classes))
        fh.write(rec.tobytes())
