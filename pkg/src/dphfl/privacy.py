"""Sensitivity, Gaussian noise calibration and the release ledger.

Calibration follows the moments-accountant form

    sigma = constant * q * Delta * sqrt(L * ln(1/delta)) / epsilon,

valid while ``epsilon < c1 * q * L``. The mechanism constants c1, c2, v1, v2
default to 1.0. They keep every scaling relation intact but are not tight
accountant constants, so plans produced with the defaults are not
deployment-grade privacy guarantees.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from dphfl.topology import Topology

if TYPE_CHECKING:
    from dphfl.engine import Schedule


class BudgetError(ValueError):
    """A privacy budget is outside the mechanism's validity range, or a
    release would exceed the number of releases the noise was calibrated for."""


@dataclass(frozen=True)
class PrivacySpec:
    epsilon: float
    delta: float
    q: float
    grad_bound: float
    c1: float = 1.0
    c2: float = 1.0
    v1: float = 1.0
    v2: float = 1.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise BudgetError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0.0 < self.delta < 1.0:
            raise BudgetError(f"delta must lie in (0, 1), got {self.delta}")
        if not 0.0 < self.q <= 1.0:
            raise BudgetError(f"q must lie in (0, 1], got {self.q}")
        if not self.grad_bound > 0:
            raise BudgetError(f"grad_bound must be > 0, got {self.grad_bound}")
        for name in ("c1", "c2", "v1", "v2"):
            if not getattr(self, name) > 0:
                raise BudgetError(f"{name} must be > 0")
        if self.enabled and math.isinf(self.grad_bound):
            raise BudgetError("DP requires a finite grad_bound (clipping norm)")

    @property
    def enabled(self) -> bool:
        """False for the infinite-epsilon sentinel (no DP noise)."""
        return math.isfinite(self.epsilon)

    @classmethod
    def disabled(cls, q: float = 1.0, grad_bound: float = math.inf) -> "PrivacySpec":
        return cls(epsilon=math.inf, delta=0.5, q=q, grad_bound=grad_bound)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SensitivitySet:
    edge_local: float
    device_local: float
    edge_global: float
    device_global: float


def sensitivities(eta_k: float, tau_k: int, G: float, s_c: int) -> SensitivitySet:
    """L2 sensitivities of the accumulated gradients sent at aggregations.

    A device's ``eta * sum(g)`` over at most ``tau_k`` clipped steps moves by at
    most ``2 eta tau G`` when one record changes; the subnet average divides
    that by ``s_c``.
    """
    device = 2.0 * eta_k * tau_k * G
    edge = device / s_c
    return SensitivitySet(edge_local=edge, device_local=device, edge_global=edge, device_global=device)


def noise_std(
    constant: float, q: float, sensitivity: float, L: int, delta: float, epsilon: float
) -> float:
    if not epsilon > 0:
        raise BudgetError(f"epsilon must be > 0, got {epsilon}")
    if L < 1:
        raise BudgetError(f"number of releases L must be >= 1, got {L}")
    if math.isinf(epsilon) or sensitivity == 0:
        return 0.0
    return constant * q * sensitivity * math.sqrt(L * math.log(1.0 / delta)) / epsilon


def validate_budget(spec: PrivacySpec, L: int) -> None:
    """Raise unless ``epsilon < c1 * q * L``."""
    if L < 1:
        raise BudgetError(f"no releases planned (L={L}) yet a budget epsilon={spec.epsilon} was requested")
    bound = spec.c1 * spec.q * L
    if not spec.epsilon < bound:
        raise BudgetError(
            f"epsilon >= c1*q*L: epsilon={spec.epsilon} but c1*q*L={bound:g} "
            f"(c1={spec.c1}, q={spec.q}, L={L})"
        )


def gaussian_mechanism_sigma(sensitivity: float, epsilon: float, delta: float) -> float:
    """Single-release Gaussian mechanism scale ``Delta*sqrt(2 ln(1.25/delta))/epsilon``.

    Reference helper only; plans are calibrated with :func:`noise_std`.
    """
    return sensitivity * math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


@dataclass(frozen=True)
class NoisePlan:
    sigma_edge_local: np.ndarray
    sigma_device_local: np.ndarray
    sigma_edge_global: np.ndarray
    sigma_device_global: np.ndarray
    local_counts: np.ndarray  # l_c per subnet
    global_count: int  # K_g

    def to_dict(self) -> dict:
        return {
            "sigma_edge_local": [float(x) for x in self.sigma_edge_local],
            "sigma_device_local": [float(x) for x in self.sigma_device_local],
            "sigma_edge_global": [float(x) for x in self.sigma_edge_global],
            "sigma_device_global": [float(x) for x in self.sigma_device_global],
            "local_counts": [int(x) for x in self.local_counts],
            "global_count": int(self.global_count),
        }

    def planned_counts(self) -> dict[tuple[int, str], int]:
        planned = {(c, "local"): int(n) for c, n in enumerate(self.local_counts)}
        planned.update({(c, "global"): int(self.global_count) for c in range(len(self.local_counts))})
        return planned


def calibrate(
    spec: PrivacySpec,
    topology: Topology,
    schedule: "Schedule",
    step_sizes: Sequence[float],
) -> NoisePlan:
    """Per-subnet noise scales for the four (tier, event) combinations.

    Local events use ``L = l_c`` and global events ``L = K_g``; edge servers use
    ``c2`` and devices ``v2``. With per-interval step sizes the largest
    resulting sigma is kept.
    """
    N = topology.num_subnets
    K_g = schedule.K_g
    ell = int(sum(schedule.local_counts))
    local_counts = np.full(N, ell, dtype=int)
    zeros = np.zeros(N)
    if not spec.enabled:
        return NoisePlan(zeros, zeros.copy(), zeros.copy(), zeros.copy(), local_counts, K_g)

    if ell > 0:
        validate_budget(spec, ell)
    validate_budget(spec, K_g)

    def std(constant: float, sensitivity: float, L: int) -> float:
        return noise_std(constant, spec.q, sensitivity, L, spec.delta, spec.epsilon)

    el, dl, eg, dg = (np.zeros(N) for _ in range(4))
    for c, s_c in enumerate(topology.sizes):
        for k in range(K_g):
            sens = sensitivities(step_sizes[k], schedule.taus[k], spec.grad_bound, int(s_c))
            if ell > 0:
                el[c] = max(el[c], std(spec.c2, sens.edge_local, ell))
                dl[c] = max(dl[c], std(spec.v2, sens.device_local, ell))
            eg[c] = max(eg[c], std(spec.c2, sens.edge_global, K_g))
            dg[c] = max(dg[c], std(spec.v2, sens.device_global, K_g))
    return NoisePlan(el, dl, eg, dg, local_counts, K_g)


def sample_noise(sigma: float, dim: int, seed: int | np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.zeros(dim)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.normal(0.0, sigma, size=dim)


@dataclass(frozen=True)
class ReleaseRecord:
    t: int
    tier: str  # "edge" | "device"
    event: str  # "local" | "global"
    subnet: int
    sigma: float
    sensitivity: float
    device: int | None = None


@dataclass
class PrivacyLedger:
    """Append-only log of noisy releases, capped by the calibrated counts.

    Every injecting entity (an edge server, or a device under an untrusted
    server) may release at most the planned number of times per event type.
    """

    planned: dict[tuple[int, str], int]
    records: list[ReleaseRecord] = field(default_factory=list)
    _per_entity: dict = field(default_factory=dict, repr=False)
    _event_times: dict = field(default_factory=dict, repr=False)

    @classmethod
    def for_plan(cls, plan: NoisePlan) -> "PrivacyLedger":
        return cls(planned=plan.planned_counts())

    def record(self, rec: ReleaseRecord) -> "PrivacyLedger":
        key = (rec.subnet, rec.event)
        limit = self.planned.get(key, 0)
        entity = (rec.subnet, rec.event, rec.tier, rec.device)
        used = self._per_entity.get(entity, 0)
        if used + 1 > limit:
            who = f"device {rec.device}" if rec.device is not None else f"edge server {rec.subnet}"
            raise BudgetError(
                f"over-budget release: {who} would make {rec.event} release #{used + 1} "
                f"at t={rec.t} but only {limit} were calibrated"
            )
        self._per_entity[entity] = used + 1
        self._event_times.setdefault(key, set()).add(rec.t)
        self.records.append(rec)
        return self

    def event_count(self, subnet: int, event: str) -> int:
        """Number of distinct aggregation events released for (subnet, event)."""
        return len(self._event_times.get((subnet, event), ()))

    def counts(self) -> dict[tuple[int, str], int]:
        return {key: self.event_count(*key) for key in self.planned}

    def to_dict(self) -> dict:
        return {
            "planned": [{"subnet": s, "event": e, "count": n} for (s, e), n in sorted(self.planned.items())],
            "records": [asdict(r) for r in self.records],
        }


def record_release(ledger: PrivacyLedger, record: ReleaseRecord) -> PrivacyLedger:
    return ledger.record(record)
