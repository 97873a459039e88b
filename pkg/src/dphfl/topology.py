"""Three-tier network hierarchy: devices, edge servers (subnets) and the cloud."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class SubnetSpec:
    size: int
    trusted: bool


@dataclass(frozen=True)
class Weights:
    """Aggregation weights. ``device_weight[i] = 1/s_c`` for the subnet of i."""

    device_weight: np.ndarray
    subnet_weight: np.ndarray

    def combined(self, device_to_subnet: np.ndarray) -> np.ndarray:
        """Per-device weight in the global loss, ``subnet_weight * device_weight``."""
        return self.subnet_weight[device_to_subnet] * self.device_weight


@dataclass(frozen=True)
class Topology:
    num_devices: int
    subnets: tuple[SubnetSpec, ...]
    device_to_subnet: np.ndarray
    # Probability each subnet was trusted with: p_c when sampled, else the
    # realized 0/1 flag. Consumed by the bound computations.
    trust_probability: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if len(self.subnets) < 1:
            raise TopologyError("at least one subnet is required")
        sizes = [s.size for s in self.subnets]
        if any(s < 1 for s in sizes):
            raise TopologyError(f"subnet sizes must be >= 1, got {sizes}")
        if sum(sizes) != self.num_devices:
            raise TopologyError(f"subnet sizes sum to {sum(sizes)}, expected {self.num_devices}")
        d2s = np.asarray(self.device_to_subnet)
        if d2s.shape != (self.num_devices,):
            raise TopologyError("device_to_subnet must map every device")
        counts = np.bincount(d2s, minlength=len(sizes))
        if len(counts) != len(sizes) or not np.array_equal(counts, sizes):
            raise TopologyError("device_to_subnet does not partition the devices by subnet size")
        d2s.setflags(write=False)
        object.__setattr__(self, "device_to_subnet", d2s)
        if not self.trust_probability:
            object.__setattr__(
                self, "trust_probability", tuple(float(s.trusted) for s in self.subnets)
            )

    @property
    def num_subnets(self) -> int:
        return len(self.subnets)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([s.size for s in self.subnets], dtype=int)

    @property
    def trusted(self) -> np.ndarray:
        return np.array([s.trusted for s in self.subnets], dtype=bool)

    def members(self, subnet: int) -> np.ndarray:
        """Global device indices of ``subnet`` (a contiguous block)."""
        return np.flatnonzero(self.device_to_subnet == subnet)

    def to_dict(self) -> dict:
        return {
            "num_devices": self.num_devices,
            "subnet_sizes": [s.size for s in self.subnets],
            "trusted": [s.trusted for s in self.subnets],
            "trust_probability": list(self.trust_probability),
        }


TrustPolicy = Union[Sequence[bool], float]


def build_topology(
    num_subnets: int,
    subnet_sizes: Sequence[int],
    trust: TrustPolicy,
    seed: int | None = None,
) -> Topology:
    """Build a topology with contiguous device blocks per subnet.

    ``trust`` is either an explicit list of booleans (one per subnet) or a
    probability ``p_c`` with which each subnet independently gets a trusted
    edge server; in the latter case ``seed`` fixes the draw. Trust is drawn
    once for the whole run.
    """
    if num_subnets < 1:
        raise TopologyError(f"num_subnets must be >= 1, got {num_subnets}")
    sizes = [int(s) for s in subnet_sizes]
    if len(sizes) != num_subnets:
        raise TopologyError(f"size mismatch: {len(sizes)} subnet sizes for {num_subnets} subnets")
    if any(s < 1 for s in sizes):
        raise TopologyError(f"subnet size must be >= 1, got {sizes}")

    if isinstance(trust, (bool, np.bool_)):
        raise TopologyError("trust must be a list of booleans or a probability")
    if isinstance(trust, (int, float, np.floating)):
        p = float(trust)
        if not 0.0 <= p <= 1.0:
            raise TopologyError(f"trust probability p_c={p} outside [0, 1]")
        # random() lies in [0, 1), so p=0 and p=1 are seed-independent
        flags = np.random.default_rng(seed).random(num_subnets) < p
        probs = (p,) * num_subnets
    else:
        flags = [bool(x) for x in trust]
        if len(flags) != num_subnets:
            raise TopologyError(f"size mismatch: {len(flags)} trust flags for {num_subnets} subnets")
        probs = tuple(float(x) for x in flags)

    subnets = tuple(SubnetSpec(size=s, trusted=bool(f)) for s, f in zip(sizes, flags))
    device_to_subnet = np.repeat(np.arange(num_subnets), sizes)
    return Topology(
        num_devices=sum(sizes),
        subnets=subnets,
        device_to_subnet=device_to_subnet,
        trust_probability=probs,
    )


def weights_of(topology: Topology) -> Weights:
    sizes = topology.sizes
    device_weight = 1.0 / sizes[topology.device_to_subnet]
    subnet_weight = np.full(topology.num_subnets, 1.0 / topology.num_subnets)
    return Weights(device_weight=device_weight, subnet_weight=subnet_weight)
