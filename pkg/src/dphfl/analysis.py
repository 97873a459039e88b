"""Model dispersion, dispersion bound constants and convergence bound terms."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from dphfl.engine import Schedule, TrainTrace
    from dphfl.privacy import PrivacySpec
    from dphfl.tasks import TaskProperties
    from dphfl.topology import Topology


class PreconditionWarning(UserWarning):
    """A bound is evaluated outside the step-size regime it was derived for."""


@dataclass(frozen=True)
class StateSnapshot:
    t: int
    device_models: np.ndarray  # (I, M)
    subnet_models: np.ndarray  # (N, M)
    global_model: np.ndarray  # (M,)
    device_to_subnet: np.ndarray
    device_weight: np.ndarray
    subnet_weight: np.ndarray


@dataclass(frozen=True)
class DispersionSample:
    t: int
    z1: float
    z2: float
    k: int | None = None


def measure_dispersion(snapshot: StateSnapshot) -> DispersionSample:
    """Weighted intra-subnet (z1) and inter-subnet (z2) squared deviations."""
    s = snapshot
    dev = s.device_models - s.subnet_models[s.device_to_subnet]
    per_device = s.device_weight * np.einsum("ij,ij->i", dev, dev)
    z1 = float(np.sum(s.subnet_weight[s.device_to_subnet] * per_device))
    sub = s.subnet_models - s.global_model
    z2 = float(np.sum(s.subnet_weight * np.einsum("ij,ij->i", sub, sub)))
    return DispersionSample(t=s.t, z1=z1, z2=z2)


# ---------------------------------------------------------------------------
# Dispersion bound constants
# ---------------------------------------------------------------------------


def _noise_mix(p: np.ndarray, s: np.ndarray, c2: float, v2: float) -> np.ndarray:
    """Per-subnet ``p c2^2/s^2 + (1-p) v2^2/s``."""
    return p * c2**2 / s**2 + (1.0 - p) * v2**2 / s


@dataclass(frozen=True)
class BoundConstants:
    b1_sq: float
    b2_sq: float
    phi_c: np.ndarray
    b1_sq_per_subnet: np.ndarray
    inputs: dict
    notes: tuple[str, ...] = ()
    lambda_plus: float | None = None

    def to_dict(self) -> dict:
        return {
            "b1_sq": self.b1_sq,
            "b2_sq": self.b2_sq,
            "phi_c": [float(x) for x in self.phi_c],
            "b1_sq_per_subnet": [float(x) for x in self.b1_sq_per_subnet],
            "inputs": self.inputs,
            "notes": list(self.notes),
            "lambda_plus": self.lambda_plus,
        }


def b1_squared(sigma: float, zeta_c: float, eta0: float, beta: float, tau: int) -> float:
    return (2.0 * sigma + zeta_c) ** 2 * ((1.0 + 2.0 * eta0 * beta) ** (tau - 1) + 1.0) ** 2


def phi(
    *,
    b1_sq: float,
    sigma: float,
    zeta: float,
    eta0: float,
    beta: float,
    tau: int,
    K_l: int,
    G: float,
    q: float,
    M: int,
    epsilon: float,
    delta: float,
    p: Sequence[float],
    s: Sequence[int],
    c2: float = 1.0,
    v2: float = 1.0,
) -> np.ndarray:
    """Per-subnet Phi_c.

    The DP factor uses ``sqrt(M * K_l * ln(1/delta))``; it vanishes for an
    infinite epsilon.
    """
    p = np.asarray(p, dtype=float)
    s = np.asarray(s, dtype=float)
    N = len(s)
    mix = _noise_mix(p, s, c2, v2)
    if math.isinf(epsilon):
        dp = np.zeros(N)
    else:
        scale = 2.0 * tau * G * q * math.sqrt(M * K_l * math.log(1.0 / delta)) / (epsilon * N)
        dp = scale * (math.sqrt(mix.sum()) + N * np.sqrt(mix))
    growth = (1.0 + 2.0 * eta0 * beta) ** (tau - 1) + 1.0
    base = 2.0 * b1_sq + 2.0 * sigma + zeta
    return (dp + base) * growth + base


def bound_constants(
    props: "TaskProperties",
    G: float,
    q: float,
    M: int,
    schedule: "Schedule",
    spec: "PrivacySpec",
    topology: "Topology",
    eta0: float,
    *,
    per_subnet: bool = False,
) -> BoundConstants:
    """Dispersion bound constants B1^2, B2^2 and Phi_c.

    B1 uses the worst intra-subnet diversity ``zeta_c`` unless ``per_subnet``
    is set, in which case ``b1_sq`` is the largest of the per-subnet values
    computed from ``props.zeta_c`` when it is a sequence.
    """
    tau, K_l, K_g = schedule.tau, schedule.K_l, schedule.K_g
    beta, sigma = props.beta, props.sigma_sgd
    notes: list[str] = []
    limit = 1.0 / (max(tau, K_g) * beta)
    if eta0 > limit * (1 + 1e-12):
        msg = f"eta0={eta0:g} exceeds 1/(max(tau, K_g) beta)={limit:g}"
        notes.append(msg)
        warnings.warn(msg, PreconditionWarning, stacklevel=2)
    if K_g > 1:
        notes.append(
            "Phi_c uses sqrt(M K_l ln(1/delta)); a derivation carrying an extra K_g factor "
            f"would scale the privacy part by sqrt(K_g)={math.sqrt(K_g):.4g}"
        )

    zc = np.atleast_1d(np.asarray(props.zeta_c, dtype=float))
    if zc.size == 1:
        zc = np.full(topology.num_subnets, zc[0])
    per = np.array([b1_squared(sigma, z, eta0, beta, tau) for z in zc])
    b1 = float(per.max()) if per_subnet else b1_squared(sigma, float(zc.max()), eta0, beta, tau)

    p = np.asarray(topology.trust_probability, dtype=float)
    s = topology.sizes
    phis = phi(
        b1_sq=b1, sigma=sigma, zeta=props.zeta, eta0=eta0, beta=beta, tau=tau, K_l=K_l,
        G=G, q=q, M=M, epsilon=spec.epsilon, delta=spec.delta, p=p, s=s, c2=spec.c2, v2=spec.v2,
    )
    rho_bar = np.full(topology.num_subnets, 1.0 / topology.num_subnets)
    b2 = float((1.0 + eta0 * beta) ** (2 * (tau - 1)) * np.sum(rho_bar * phis**2))
    inputs = {
        "beta": beta, "zeta": props.zeta, "zeta_c": [float(x) for x in zc], "sigma": sigma,
        "G": G, "q": q, "M": M, "tau": tau, "K_l": K_l, "K_g": K_g,
        "epsilon": spec.epsilon, "delta": spec.delta, "c2": spec.c2, "v2": spec.v2,
        "p_c": [float(x) for x in p], "s_c": [int(x) for x in s], "N": topology.num_subnets,
        "eta0": eta0,
    }
    return BoundConstants(b1, b2, phis, per, inputs, tuple(notes))


# ---------------------------------------------------------------------------
# Run-level checks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DispersionReport:
    samples_checked: int
    z1_violations: int
    z2_violations: int
    max_ratio_z1: float
    max_ratio_z2: float

    @property
    def max_ratio(self) -> float:
        return max(self.max_ratio_z1, self.max_ratio_z2)

    @property
    def ok(self) -> bool:
        return self.z1_violations == 0 and self.z2_violations == 0

    def to_dict(self) -> dict:
        return {**asdict(self), "max_ratio": self.max_ratio, "ok": self.ok}


def _ratio(z: float, bound: float) -> float:
    if bound > 0:
        return z / bound
    return 0.0 if z == 0 else math.inf


def check_dispersion_bounds(
    trace: "TrainTrace", constants: BoundConstants, schedule: "Schedule"
) -> DispersionReport:
    """Compare every recorded sample of interval k with ``eta_k tau B^2``."""
    etas = [r.eta_k for r in trace.rounds]
    n = v1 = v2 = 0
    r1 = r2 = 0.0
    for smp in trace.dispersion:
        if smp.k is None or smp.k >= len(etas):
            continue
        scale = etas[smp.k] * schedule.taus[smp.k]
        a = _ratio(smp.z1, scale * constants.b1_sq)
        b = _ratio(smp.z2, scale * constants.b2_sq)
        n += 1
        v1 += a > 1.0
        v2 += b > 1.0
        r1, r2 = max(r1, a), max(r2, b)
    return DispersionReport(n, int(v1), int(v2), r1, r2)


def term_b(
    *,
    tau: int,
    K_l: int,
    M: int,
    q: float,
    G: float,
    delta: float,
    epsilon: float,
    p: Sequence[float],
    s: Sequence[int],
    c2: float = 1.0,
    v2: float = 1.0,
) -> float:
    """The non-vanishing privacy floor of the convergence bound (0 without DP)."""
    if math.isinf(epsilon):
        return 0.0
    p = np.asarray(p, dtype=float)
    s = np.asarray(s, dtype=float)
    N = len(s)
    lead = 4.0 * tau * (K_l**3 + 1) * M * q**2 * G**2 * math.log(1.0 / delta) / (N**2 * epsilon**2)
    return float(lead * _noise_mix(p, s, c2, v2).sum())


def term_a1(gamma: float, gap: float, tau: int, K_g: int) -> float:
    return 2.0 * gamma * gap / (tau * math.sqrt(K_g + 1))


def term_a2(gamma: float, beta: float, tau: int, K_g: int, b1_sq: float, b2_sq: float, G: float, sigma: float) -> float:
    return beta * gamma / math.sqrt(K_g + 1) * (beta * tau * (b1_sq + b2_sq) + G**2 + tau * sigma**2)


@dataclass(frozen=True)
class TheoremReport:
    term_a1: float
    term_a2: float
    term_b: float
    lhs_empirical: float
    satisfied: bool
    f_star: float
    f_star_source: str
    notes: tuple[str, ...] = field(default=())

    @property
    def rhs(self) -> float:
        return self.term_a1 + self.term_a2 + self.term_b

    def to_dict(self) -> dict:
        return {**asdict(self), "notes": list(self.notes), "rhs": self.rhs}


def theorem_report(
    trace: "TrainTrace",
    constants: BoundConstants,
    *,
    gamma: float,
    f_star: float,
    f_star_source: str = "analytic",
    f0: float | None = None,
) -> TheoremReport:
    """Evaluate the three bound terms and compare with the trace's LHS.

    ``f_star`` is the optimal loss, or for tasks without a closed form a lower
    surrogate (``f_star_source`` documents which). ``f0`` defaults to the loss
    recorded at ``t_0``.
    """
    c = constants.inputs
    K_g = len(trace.rounds)
    f0 = trace.rounds[0].loss if f0 is None else f0
    a1 = term_a1(gamma, f0 - f_star, c["tau"], K_g)
    a2 = term_a2(gamma, c["beta"], c["tau"], K_g, constants.b1_sq, constants.b2_sq, c["G"], c["sigma"])
    b = term_b(
        tau=c["tau"], K_l=c["K_l"], M=c["M"], q=c["q"], G=c["G"], delta=c["delta"],
        epsilon=c["epsilon"], p=c["p_c"], s=c["s_c"], c2=c["c2"], v2=c["v2"],
    )
    lhs = trace.lhs_cumulative_average()
    return TheoremReport(
        term_a1=a1, term_a2=a2, term_b=b, lhs_empirical=lhs,
        satisfied=bool(lhs <= a1 + a2 + b), f_star=f_star, f_star_source=f_star_source,
        notes=constants.notes,
    )
