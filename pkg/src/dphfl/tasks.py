"""Learning problems: data, non-i.i.d. shards, and loss/gradient oracles.

Two loss families are supported. ``quadratic`` uses the per-record loss
``0.5 * ||w - x||^2`` so device ``i`` minimises ``0.5 * ||w - a_i||^2`` up to a
constant, where ``a_i`` is the mean of its records. ``softmax`` (and
``image-softmax``, the same model on IDX image data) is multinomial logistic
regression with one weight block per class and no bias, so the model has
``num_classes * feature_dim`` coordinates.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from dphfl.topology import Topology, build_topology, weights_of

KINDS = ("quadratic", "softmax", "image-softmax")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetError(ValueError):
    pass


class IdxFormatError(DatasetError):
    pass


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    # Row indices into the parent dataset when this is a shard.
    source_index: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, rows: np.ndarray) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        parent = self.source_index if self.source_index is not None else np.arange(len(self))
        return Dataset(self.features[rows], self.labels[rows], self.num_classes, parent[rows])

    def check(self) -> "Dataset":
        """Validate the full-dataset invariants; returns self."""
        if self.features.ndim != 2 or self.features.shape[0] != len(self.labels):
            raise DatasetError("features must be a (rows, dim) matrix with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels outside [0, {self.num_classes})")
        missing = np.setdiff1d(np.arange(self.num_classes), self.labels)
        if missing.size:
            raise DatasetError(f"classes without any data point: {missing.tolist()}")
        return self


@dataclass(frozen=True)
class TaskInstance:
    kind: str
    model_dim: int
    shards: tuple[Dataset, ...]
    topology: Topology
    grad_bound: float = math.inf
    optimum: np.ndarray | None = None
    num_classes: int = 1
    # Per-device centres a_i, quadratic kind only.
    centers: np.ndarray | None = None
    loss_weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if len(self.shards) != self.topology.num_devices:
            raise ValueError(
                f"{len(self.shards)} shards for {self.topology.num_devices} devices"
            )
        if not self.grad_bound > 0:
            raise ValueError("grad_bound must be positive")
        for shard in self.shards:
            if shard.features.shape[1] * self._blocks() != self.model_dim:
                raise ValueError("shard feature dimension inconsistent with model_dim")
        w = weights_of(self.topology)
        object.__setattr__(self, "loss_weights", w.combined(self.topology.device_to_subnet))

    def _blocks(self) -> int:
        return 1 if self.kind == "quadratic" else self.num_classes

    @property
    def num_devices(self) -> int:
        return len(self.shards)


@dataclass(frozen=True)
class Evaluation:
    loss: float
    grad_norm_sq: float
    accuracy: float | None


@dataclass(frozen=True)
class TaskProperties:
    beta: float
    zeta: float
    zeta_c: np.ndarray
    sigma_sgd: float
    source: str  # "analytic" | "estimated"
    probe_count: int = 0

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "zeta": self.zeta,
            "zeta_c": [float(z) for z in self.zeta_c],
            "sigma_sgd": self.sigma_sgd,
            "source": self.source,
            "probe_count": self.probe_count,
        }


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def quadratic_task(
    records: Sequence[np.ndarray],
    topology: Topology,
    grad_bound: float = math.inf,
) -> TaskInstance:
    """Quadratic task from explicit per-device record matrices."""
    shards = []
    for x in records:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if len(x) == 0:
            raise DatasetError("empty shard")
        shards.append(Dataset(x, np.zeros(len(x), dtype=np.int64), 1))
    centers = np.stack([s.features.mean(axis=0) for s in shards])
    weights = weights_of(topology).combined(topology.device_to_subnet)
    optimum = weights @ centers
    return TaskInstance(
        kind="quadratic",
        model_dim=centers.shape[1],
        shards=tuple(shards),
        topology=topology,
        grad_bound=grad_bound,
        optimum=optimum,
        centers=centers,
    )


def make_quadratic(
    model_dim: int,
    num_devices: int,
    heterogeneity: float,
    seed: int,
    *,
    topology: Topology | None = None,
    points_per_device: int = 10,
    point_spread: float = 0.0,
    grad_bound: float = math.inf,
) -> TaskInstance:
    """Strongly convex testbed with per-device centres within ``heterogeneity``
    of a common centre.

    Records of device i are ``a_i`` plus zero-mean perturbations of scale
    ``point_spread`` (re-centred so the record mean is exactly ``a_i``).
    Without a topology all devices share one subnet.
    """
    if model_dim < 1:
        raise ValueError("model_dim must be >= 1")
    if heterogeneity < 0:
        raise ValueError("heterogeneity must be non-negative")
    if topology is None:
        topology = build_topology(1, [num_devices], [True])
    elif topology.num_devices != num_devices:
        raise ValueError(f"topology has {topology.num_devices} devices, expected {num_devices}")

    rng = np.random.default_rng(seed)
    common = rng.normal(size=model_dim)
    direction = rng.normal(size=(num_devices, model_dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = heterogeneity * rng.random(num_devices) ** (1.0 / model_dim)
    centers = common + radius[:, None] * direction

    records = []
    for a in centers:
        z = rng.normal(size=(points_per_device, model_dim))
        z -= z.mean(axis=0)
        records.append(a + point_spread * z)
    return quadratic_task(records, topology, grad_bound)


def make_softmax(
    model_dim: int,
    num_classes: int,
    samples_per_class: int,
    separation: float,
    seed: int,
) -> Dataset:
    """Gaussian class clusters whose means are pairwise ``separation`` apart.

    Feature dimension is ``model_dim // num_classes``; within-class noise has
    per-coordinate variance ``1/feature_dim`` so rows have norm close to one.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if model_dim % num_classes:
        raise ValueError(f"model_dim={model_dim} not divisible by num_classes={num_classes}")
    dim = model_dim // num_classes
    rng = np.random.default_rng(seed)
    basis = rng.normal(size=(dim, num_classes))
    if dim >= num_classes:
        basis, _ = np.linalg.qr(basis)
    else:
        basis /= np.linalg.norm(basis, axis=0, keepdims=True)
    means = (separation / math.sqrt(2.0)) * basis.T

    labels = np.repeat(np.arange(num_classes), samples_per_class)
    labels = labels[rng.permutation(len(labels))]
    noise = rng.normal(scale=1.0 / math.sqrt(dim), size=(len(labels), dim))
    return Dataset(means[labels] + noise, labels.astype(np.int64), num_classes).check()


def train_test_split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    order = np.random.default_rng(seed).permutation(len(dataset))
    cut = int(round(len(dataset) * (1.0 - test_fraction)))
    return dataset.subset(np.sort(order[:cut])), dataset.subset(np.sort(order[cut:]))


def softmax_task(
    shards: Sequence[Dataset],
    topology: Topology,
    grad_bound: float = math.inf,
    kind: str = "softmax",
) -> TaskInstance:
    if not shards:
        raise ValueError("no shards")
    num_classes = shards[0].num_classes
    dim = shards[0].features.shape[1]
    for s in shards:
        if len(s) == 0:
            raise DatasetError("empty shard")
    return TaskInstance(
        kind=kind,
        model_dim=num_classes * dim,
        shards=tuple(shards),
        topology=topology,
        grad_bound=grad_bound,
        num_classes=num_classes,
    )


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------


def _read_idx(path: Path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated file")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims))
    if len(raw) - header < need:
        raise IdxFormatError(f"{path}: truncated file")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=header).reshape(dims)


def load_idx_images(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Read an IDX image/label pair; pixel values are scaled to [0, 1]."""
    images = _read_idx(Path(images_path), IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(Path(labels_path), IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    num_classes = int(labels.max()) + 1 if len(labels) else 0
    return Dataset(features, labels, num_classes).check()


def write_idx(path: str | Path, array: np.ndarray) -> None:
    """Write a uint8 array as an IDX file (3-d images or 1-d labels)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = {3: IDX_IMAGES_MAGIC, 1: IDX_LABELS_MAGIC}[array.ndim]
    head = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(head + array.tobytes())


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------


def partition_noniid(
    dataset: Dataset,
    topology: Topology | int,
    labels_per_device: int,
    seed: int,
) -> list[Dataset]:
    """Give every device points from exactly ``labels_per_device`` labels.

    Device d (in a seeded random order) takes the labels
    ``perm[(d*L + j) % C]`` for ``j < L``, which spreads demand evenly over
    labels; each label's points are then split disjointly among the devices
    that asked for it.
    """
    num_devices = topology if isinstance(topology, int) else topology.num_devices
    C = dataset.num_classes
    L = labels_per_device
    if not 1 <= L <= C:
        raise PartitionError(f"labels_per_device={L} must lie in [1, {C}]")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(C)
    order = rng.permutation(num_devices)

    wanted: dict[int, list[int]] = {int(c): [] for c in range(C)}
    for slot, device in enumerate(order):
        for j in range(L):
            wanted[int(perm[(slot * L + j) % C])].append(int(device))

    rows: list[list[np.ndarray]] = [[] for _ in range(num_devices)]
    for label in range(C):
        takers = wanted[label]
        if not takers:
            continue
        pts = np.flatnonzero(dataset.labels == label)
        if len(pts) < len(takers):
            raise PartitionError(
                f"infeasible assignment: label {label} has {len(pts)} points "
                f"for {len(takers)} devices"
            )
        pts = pts[rng.permutation(len(pts))]
        for device, part in zip(takers, np.array_split(pts, len(takers))):
            rows[device].append(part)
    return [dataset.subset(np.sort(np.concatenate(r))) for r in rows]


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


def clip(g: np.ndarray, bound: float) -> np.ndarray:
    """Project ``g`` onto the L2 ball of radius ``bound``."""
    norm = float(np.linalg.norm(g))
    if norm > bound:
        return g * (bound / norm)
    return g


def _softmax_parts(task: TaskInstance, x: np.ndarray, w: np.ndarray) -> np.ndarray:
    W = w.reshape(task.num_classes, -1)
    return x @ W.T


def _gradient(task: TaskInstance, shard: Dataset, rows, w: np.ndarray) -> np.ndarray:
    x = shard.features if rows is None else shard.features[rows]
    if task.kind == "quadratic":
        return w - x.mean(axis=0)
    y = shard.labels if rows is None else shard.labels[rows]
    p = softmax(_softmax_parts(task, x, w), axis=1)
    p[np.arange(len(y)), y] -= 1.0
    return (p.T @ x).ravel() / len(y)


def _loss(task: TaskInstance, shard: Dataset, w: np.ndarray) -> float:
    x = shard.features
    if task.kind == "quadratic":
        return 0.5 * float(np.mean(np.sum((w - x) ** 2, axis=1)))
    z = _softmax_parts(task, x, w)
    return float(np.mean(logsumexp(z, axis=1) - z[np.arange(len(x)), shard.labels]))


def device_gradient(task: TaskInstance, device: int, model: np.ndarray) -> np.ndarray:
    """Exact clip-free gradient of the local loss F_i."""
    return _gradient(task, task.shards[device], None, np.asarray(model, dtype=np.float64))


def batch_size(num_points: int, q: float) -> int:
    if not 0.0 < q <= 1.0:
        raise ValueError(f"sampling fraction q={q} outside (0, 1]")
    # the epsilon guards against q*D landing a hair above an integer
    return max(1, min(num_points, math.ceil(q * num_points - 1e-9)))


def sample_batch(task: TaskInstance, device: int, q: float, rng: np.random.Generator) -> np.ndarray:
    n = len(task.shards[device])
    if n == 0:
        raise DatasetError(f"device {device} has an empty shard")
    b = batch_size(n, q)
    if b == n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=b, replace=False))


def batch_gradient(
    task: TaskInstance, device: int, model: np.ndarray, rows: np.ndarray, clipped: bool = True
) -> np.ndarray:
    g = _gradient(task, task.shards[device], rows, model)
    return clip(g, task.grad_bound) if clipped else g


def stochastic_gradient(
    task: TaskInstance,
    device: int,
    model: np.ndarray,
    q: float,
    seed: int | np.random.Generator,
) -> np.ndarray:
    """Clipped minibatch gradient of device ``device`` at ``model``.

    The minibatch has the fixed size ``ceil(q * D_i)`` and is drawn without
    replacement.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    rows = sample_batch(task, device, q, rng)
    return batch_gradient(task, device, np.asarray(model, dtype=np.float64), rows)


def realized_sampling_fraction(task: TaskInstance, q: float) -> float:
    """Largest realised batch fraction ``ceil(q D_i)/D_i`` over devices."""
    return max(batch_size(len(s), q) / len(s) for s in task.shards)


def _accuracy(task: TaskInstance, shard: Dataset, w: np.ndarray) -> float:
    pred = np.argmax(_softmax_parts(task, shard.features, w), axis=1)
    return float(np.mean(pred == shard.labels))


def evaluate(task: TaskInstance, model: np.ndarray) -> Evaluation:
    """Full-batch, clip-free global loss, squared gradient norm and accuracy."""
    w = np.asarray(model, dtype=np.float64)
    weights = task.loss_weights
    loss = 0.0
    grad = np.zeros(task.model_dim)
    acc = 0.0
    for weight, shard in zip(weights, task.shards):
        loss += weight * _loss(task, shard, w)
        grad += weight * _gradient(task, shard, None, w)
        if task.kind != "quadratic":
            acc += weight * _accuracy(task, shard, w)
    return Evaluation(
        loss=float(loss),
        grad_norm_sq=float(grad @ grad),
        accuracy=None if task.kind == "quadratic" else float(acc),
    )


def accuracy_on(task: TaskInstance, model: np.ndarray, dataset: Dataset) -> float:
    """Plain accuracy of ``model`` on a held-out dataset (classification kinds)."""
    return _accuracy(task, dataset, np.asarray(model, dtype=np.float64))


def softmax_smoothness_bound(task: TaskInstance) -> float:
    """Upper bound on the smoothness of every local softmax loss.

    The cross-entropy Hessian is ``(diag(p) - p p^T) kron x x^T`` and the first
    factor has spectral norm at most 1/2.
    """
    best = 0.0
    for shard in task.shards:
        top = np.linalg.norm(shard.features, 2) ** 2 / len(shard)
        best = max(best, 0.5 * float(top))
    return best


def _quadratic_properties(task: TaskInstance, q: float) -> TaskProperties:
    topo = task.topology
    centers = task.centers
    rho = weights_of(topo).device_weight
    subnet_centers = np.stack(
        [(rho[topo.members(c), None] * centers[topo.members(c)]).sum(axis=0)
         for c in range(topo.num_subnets)]
    )
    global_center = task.optimum
    zeta = float(np.max(np.linalg.norm(subnet_centers - global_center, axis=1)))
    zeta_c = np.array([
        float(np.max(np.linalg.norm(centers[topo.members(c)] - subnet_centers[c], axis=1)))
        for c in range(topo.num_subnets)
    ])
    # E||mean of b rows drawn without replacement - a_i||^2 = v/b * (D-b)/(D-1)
    var = 0.0
    for shard, a in zip(task.shards, centers):
        D = len(shard)
        b = batch_size(D, q)
        if D > 1:
            v = float(np.mean(np.sum((shard.features - a) ** 2, axis=1)))
            var = max(var, v / b * (D - b) / (D - 1))
    return TaskProperties(
        beta=1.0, zeta=zeta, zeta_c=zeta_c, sigma_sgd=math.sqrt(var), source="analytic"
    )


def estimate_properties(
    task: TaskInstance,
    probe_models: Sequence[np.ndarray],
    probe_pairs: int,
    seed: int,
    q: float = 1.0,
) -> TaskProperties:
    """Constants of the smoothness/diversity/SGD-noise assumptions.

    Quadratic tasks get closed-form values. Otherwise every value is a
    maximum over the probes, hence a lower bound on the true constant.
    """
    if not probe_models:
        raise ValueError("probe_models must be non-empty")
    if task.kind == "quadratic":
        return _quadratic_properties(task, q)

    rng = np.random.default_rng(seed)
    probes = [np.asarray(p, dtype=np.float64) for p in probe_models]
    topo = task.topology
    rho = weights_of(topo).device_weight

    beta = 0.0
    for _ in range(probe_pairs):
        a, b = rng.integers(len(probes), size=2)
        w1 = probes[a]
        w2 = probes[b] if a != b else w1 + 0.1 * rng.normal(size=w1.shape) / math.sqrt(w1.size)
        dist = float(np.linalg.norm(w1 - w2))
        if dist == 0.0:
            continue
        for i in range(task.num_devices):
            diff = device_gradient(task, i, w1) - device_gradient(task, i, w2)
            beta = max(beta, float(np.linalg.norm(diff)) / dist)

    zeta = 0.0
    zeta_c = np.zeros(topo.num_subnets)
    sigma = 0.0
    for w in probes:
        grads = np.stack([device_gradient(task, i, w) for i in range(task.num_devices)])
        subnet = np.stack([
            (rho[topo.members(c), None] * grads[topo.members(c)]).sum(axis=0)
            for c in range(topo.num_subnets)
        ])
        total = subnet.mean(axis=0)
        zeta = max(zeta, float(np.max(np.linalg.norm(subnet - total, axis=1))))
        for c in range(topo.num_subnets):
            dev = np.linalg.norm(grads[topo.members(c)] - subnet[c], axis=1)
            zeta_c[c] = max(zeta_c[c], float(dev.max()))
        for i in range(task.num_devices):
            rows = sample_batch(task, i, q, rng)
            noisy = batch_gradient(task, i, w, rows, clipped=False)
            sigma = max(sigma, float(np.linalg.norm(noisy - grads[i])))
    return TaskProperties(
        beta=beta, zeta=zeta, zeta_c=zeta_c, sigma_sgd=sigma,
        source="estimated", probe_count=len(probes) + probe_pairs,
    )
