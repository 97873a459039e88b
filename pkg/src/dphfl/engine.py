"""Three-tier training loop with trust-dependent noise injection.

Devices run clipped SGD and accumulate ``eta_k * g`` in a buffer. At a local
aggregation instant the edge server of subnet c replaces its model with

    w_c <- w_c(t') - sum_j rho_j * buffer_j + noise_c,

where ``noise_c`` is one edge draw when the server is trusted, and the
weighted average of per-device draws otherwise. The interval's last segment
is consumed by the global aggregation, where the cloud averages the per-subnet
candidates formed by the same rule with the global-event noise scales.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from dphfl import tasks as tasks_mod
from dphfl.analysis import DispersionSample, StateSnapshot, measure_dispersion
from dphfl.privacy import (
    BudgetError,
    NoisePlan,
    PrivacyLedger,
    PrivacySpec,
    ReleaseRecord,
    SensitivitySet,
    calibrate,
    sample_noise,
    sensitivities,
)
from dphfl.seeding import STREAMS, make_streams, stream_seed
from dphfl.tasks import Evaluation, TaskInstance
from dphfl.topology import Topology, weights_of

REPLAY_TOLERANCE = 1e-9


class ScheduleError(ValueError):
    pass


class StepSizeError(ValueError):
    pass


class RunError(RuntimeError):
    """A failure inside the training loop, tagged with where it happened."""

    def __init__(self, message: str, t: int, k: int, subnet: int | None, cause: Exception | None = None):
        where = f"t={t}, k={k}" + (f", subnet={subnet}" if subnet is not None else "")
        super().__init__(f"{where}: {message}")
        self.t, self.k, self.subnet, self.cause = t, k, subnet, cause


# ---------------------------------------------------------------------------
# Schedule and step sizes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    K_g: int
    taus: tuple[int, ...]
    periods: tuple[int, ...]

    @property
    def boundaries(self) -> tuple[int, ...]:
        """``t_0 = 0, ..., t_{K_g} = T``."""
        return tuple(int(x) for x in np.concatenate([[0], np.cumsum(self.taus)]))

    @property
    def horizon(self) -> int:
        return int(sum(self.taus))

    def local_offsets(self, k: int) -> tuple[int, ...]:
        m, tau = self.periods[k], self.taus[k]
        return tuple(range(m, tau, m))

    def local_instants(self, k: int) -> frozenset[int]:
        t_k = self.boundaries[k]
        return frozenset(t_k + off for off in self.local_offsets(k))

    @property
    def local_counts(self) -> tuple[int, ...]:
        """Local aggregations per interval (the same for every subnet)."""
        return tuple(len(self.local_offsets(k)) for k in range(self.K_g))

    @property
    def K_l(self) -> int:
        counts = set(self.local_counts)
        if len(counts) != 1:
            raise ScheduleError("local aggregation count varies across intervals")
        return counts.pop()

    @property
    def tau(self) -> int:
        if len(set(self.taus)) != 1:
            raise ScheduleError("interval length varies across intervals")
        return self.taus[0]

    def to_dict(self) -> dict:
        return {"K_g": self.K_g, "taus": list(self.taus), "periods": list(self.periods)}


def make_schedule(K_g: int, tau: int | Sequence[int], m: int | Sequence[int]) -> Schedule:
    if K_g < 1:
        raise ScheduleError(f"K_g must be >= 1, got {K_g}")
    taus = (int(tau),) * K_g if np.isscalar(tau) else tuple(int(x) for x in tau)
    periods = (int(m),) * K_g if np.isscalar(m) else tuple(int(x) for x in m)
    if len(taus) != K_g or len(periods) != K_g:
        raise ScheduleError("per-interval tau/m lists must have K_g entries")
    for k, (t, p) in enumerate(zip(taus, periods)):
        if t < 1 or p < 1:
            raise ScheduleError(f"interval {k}: tau and m must be >= 1 (tau={t}, m={p})")
        if p > t:
            raise ScheduleError(f"interval {k}: local period m={p} exceeds tau={t}")
    return Schedule(K_g=int(K_g), taus=taus, periods=periods)


@dataclass(frozen=True)
class StepSizeSchedule:
    """``eta_k = gamma / sqrt(k + 1)``.

    ``gamma`` must respect ``gamma <= min(1/tau, 1/K_g) / beta_estimate``
    unless ``allow_above_cap`` is set.
    """

    gamma: float
    beta_estimate: float = 1.0
    allow_above_cap: bool = False

    def __post_init__(self):
        if not self.gamma > 0:
            raise StepSizeError(f"gamma must be > 0, got {self.gamma}")
        if not self.beta_estimate > 0:
            raise StepSizeError(f"beta_estimate must be > 0, got {self.beta_estimate}")

    def cap(self, schedule: Schedule) -> float:
        return min(1.0 / max(schedule.taus), 1.0 / schedule.K_g) / self.beta_estimate

    def validate(self, schedule: Schedule) -> None:
        cap = self.cap(schedule)
        if self.gamma > cap and not self.allow_above_cap:
            raise StepSizeError(
                f"gamma={self.gamma} exceeds min(1/tau, 1/K_g)/beta = {cap:g}; "
                "set allow_above_cap to override"
            )

    def etas(self, K_g: int) -> list[float]:
        return [step_size(k, self) for k in range(K_g)]


def step_size(k: int, sched: StepSizeSchedule) -> float:
    if k < 0:
        raise ValueError("k must be >= 0")
    return sched.gamma / math.sqrt(k + 1)


# ---------------------------------------------------------------------------
# State and per-event operations
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    topology: Topology
    device_models: np.ndarray  # (I, M)
    buffers: np.ndarray  # (I, M), eta * sum of clipped gradients since last send
    subnet_models: np.ndarray  # (N, M), edge model at its last aggregation
    last_aggregation: np.ndarray  # (N,)
    global_model: np.ndarray  # (M,)
    t: int = 0
    k: int = 0

    @classmethod
    def broadcast(cls, topology: Topology, w0: np.ndarray) -> "TrainState":
        I, N = topology.num_devices, topology.num_subnets
        w0 = np.asarray(w0, dtype=np.float64)
        return cls(
            topology=topology,
            device_models=np.tile(w0, (I, 1)),
            buffers=np.zeros((I, w0.size)),
            subnet_models=np.tile(w0, (N, 1)),
            last_aggregation=np.zeros(N, dtype=int),
            global_model=w0.copy(),
        )

    def snapshot(self, copy: bool = True) -> StateSnapshot:
        """Snapshot with the auxiliary (weighted-average) subnet and global models."""
        w = weights_of(self.topology)
        d2s = self.topology.device_to_subnet
        averaging = np.zeros((self.topology.num_subnets, len(d2s)))
        averaging[d2s, np.arange(len(d2s))] = w.device_weight
        # average as offsets from one member so identical models average exactly
        first = np.unique(d2s, return_index=True)[1]
        anchor = self.device_models[first]
        subnet = anchor + averaging @ (self.device_models - anchor[d2s])
        total = subnet[0] + w.subnet_weight @ (subnet - subnet[0])
        return StateSnapshot(
            t=self.t,
            device_models=self.device_models.copy() if copy else self.device_models,
            subnet_models=subnet,
            global_model=total,
            device_to_subnet=d2s,
            device_weight=w.device_weight,
            subnet_weight=w.subnet_weight,
        )


def _sgd_update(state, device, task, eta, rng, q):
    rows = tasks_mod.sample_batch(task, device, q, rng)
    g = tasks_mod.batch_gradient(task, device, state.device_models[device], rows)
    state.device_models[device] -= eta * g
    state.buffers[device] += eta * g
    return g, rows


def local_sgd_step(
    state: TrainState,
    device: int,
    task: TaskInstance,
    eta: float,
    rng: np.random.Generator,
    q: float = 1.0,
) -> np.ndarray:
    """One clipped SGD step on ``device``; updates the state in place.

    Returns the clipped gradient that was applied.
    """
    g, _ = _sgd_update(state, device, task, eta, rng, q)
    return g


def _subnet_noise(state, subnet, sigma_edge, sigma_device, rng, ledger, event, sens):
    """Aggregate noise term added to subnet ``subnet``'s edge model."""
    topo = state.topology
    M = state.device_models.shape[1]
    edge_sens = sens.edge_local if sens is not None else math.nan
    device_sens = sens.device_local if sens is not None else math.nan
    if topo.subnets[subnet].trusted:
        noise = sample_noise(sigma_edge, M, rng)
        ledger.record(ReleaseRecord(state.t, "edge", event, subnet, sigma_edge, edge_sens))
        return noise
    members = topo.members(subnet)
    # each device transmits buffer_j + n_j and the server subtracts the average
    total = np.zeros(M)
    for j in members:
        total += sample_noise(sigma_device, M, rng)
        ledger.record(ReleaseRecord(state.t, "device", event, subnet, sigma_device, device_sens, int(j)))
    return -total / len(members)


def local_aggregate(
    state: TrainState,
    subnet: int,
    plan: NoisePlan,
    ledger: PrivacyLedger,
    rng: np.random.Generator,
    sens: SensitivitySet | None = None,
) -> np.ndarray:
    """Aggregate subnet ``subnet`` at the current time and synchronise it.

    Updates the state in place and returns the aggregate noise term added to
    the edge model. ``sens`` is only used to annotate the ledger records.
    """
    members = state.topology.members(subnet)
    noise = _subnet_noise(
        state, subnet, plan.sigma_edge_local[subnet], plan.sigma_device_local[subnet],
        rng, ledger, "local", sens,
    )
    new = state.subnet_models[subnet] - state.buffers[members].mean(axis=0) + noise
    state.subnet_models[subnet] = new
    state.device_models[members] = new
    state.buffers[members] = 0.0
    state.last_aggregation[subnet] = state.t
    return noise


def global_aggregate(
    state: TrainState,
    plan: NoisePlan,
    ledger: PrivacyLedger,
    rng: np.random.Generator,
    sens: Sequence[SensitivitySet] | None = None,
) -> np.ndarray:
    """Global aggregation at ``t = t_{k+1}``; updates the state in place.

    Returns the per-subnet aggregate noise terms, shape ``(N, M)``; the cloud
    model carries their ``subnet_weight``-weighted sum.
    """
    topo = state.topology
    candidates = np.empty_like(state.subnet_models)
    noises = np.empty_like(state.subnet_models)
    for c in range(topo.num_subnets):
        members = topo.members(c)
        noises[c] = _subnet_noise(
            state, c, plan.sigma_edge_global[c], plan.sigma_device_global[c],
            rng, ledger, "global", sens[c] if sens is not None else None,
        )
        candidates[c] = state.subnet_models[c] - state.buffers[members].mean(axis=0) + noises[c]
    new = weights_of(topo).subnet_weight @ candidates
    state.global_model = new
    state.subnet_models[:] = new
    state.device_models[:] = new
    state.buffers[:] = 0.0
    state.last_aggregation[:] = state.t
    state.k += 1
    return noises


def check_sync(state: TrainState, subnet: int | None = None) -> None:
    """Assert the post-aggregation synchronisation invariants."""
    topo = state.topology
    subnets = range(topo.num_subnets) if subnet is None else [subnet]
    for c in subnets:
        members = topo.members(c)
        if not np.array_equal(state.device_models[members], np.broadcast_to(state.subnet_models[c], (len(members), state.subnet_models.shape[1]))):
            raise AssertionError(f"subnet {c} devices not synchronised at t={state.t}")
        if np.any(state.buffers[members]):
            raise AssertionError(f"subnet {c} buffers not cleared at t={state.t}")
    if subnet is None and not np.array_equal(state.subnet_models, np.broadcast_to(state.global_model, state.subnet_models.shape)):
        raise AssertionError(f"edge models differ from the global model at t={state.t}")


# ---------------------------------------------------------------------------
# Trace
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RoundRecord:
    k: int
    t_k: int
    loss: float
    grad_norm_sq: float
    accuracy: float | None
    eta_k: float
    noise_l2_local_mean: float
    noise_l2_global: float
    model_digest: str
    batch_digest: str
    replay_error: float


@dataclass
class RoundVectors:
    """Raw material for replaying one global round from recorded draws."""

    start: np.ndarray
    eta: float
    step_gradients: np.ndarray  # (tau, M): sum_c vr_c sum_j rho_j g_j at each step
    local_noise: list[tuple[int, int, np.ndarray]]  # (t, subnet, aggregate noise)
    global_noise: np.ndarray  # (N, M)
    end: np.ndarray


@dataclass
class TrainTrace:
    config: dict
    seeds: dict
    plan: NoisePlan
    rounds: list[RoundRecord]
    final: Evaluation
    final_model: np.ndarray
    initial_model: np.ndarray
    ledger: PrivacyLedger
    dispersion: list[DispersionSample] = field(default_factory=list)
    local_event_counts: list[int] = field(default_factory=list)
    vectors: list[RoundVectors] = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.rounds[0].loss

    def lhs_cumulative_average(self) -> float:
        """``(1/K_g) sum_k ||grad F(w(t_k))||^2`` over the recorded rounds."""
        return float(np.mean([r.grad_norm_sq for r in self.rounds]))

    def header(self) -> dict:
        ledger_counts = [
            {"subnet": c, "event": e, "count": n, "planned": self.ledger.planned[(c, e)]}
            for (c, e), n in sorted(self.ledger.counts().items())
        ]
        return {
            "config": self.config,
            "seeds": self.seeds,
            "plan": self.plan.to_dict(),
            "final": {
                "loss": self.final.loss,
                "grad_norm_sq": self.final.grad_norm_sq,
                "accuracy": self.final.accuracy,
                "model_digest": _digest(self.final_model),
            },
            "ledger": {"counts": ledger_counts, "releases": len(self.ledger.records)},
            "local_event_counts": list(self.local_event_counts),
            "rounds": [
                {"k": r.k, "model_digest": r.model_digest, "batch_digest": r.batch_digest,
                 "replay_error": r.replay_error}
                for r in self.rounds
            ],
            "dispersion": [[d.t, d.k, d.z1, d.z2] for d in self.dispersion],
        }

    def csv_text(self) -> str:
        lines = [",".join(CSV_COLUMNS)]
        for r in self.rounds:
            lines.append(",".join(format_value(getattr(r, col)) for col in CSV_COLUMNS))
        return "\n".join(lines) + "\n"

    def write(self, directory: str | Path) -> None:
        """Write ``trace.json`` and ``trace.csv``; output is byte-stable."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "trace.json").write_text(dump_json(self.header()))
        (directory / "trace.csv").write_text(self.csv_text())


CSV_COLUMNS = (
    "k", "t_k", "loss", "grad_norm_sq", "accuracy", "eta_k",
    "noise_l2_local_mean", "noise_l2_global",
)


def format_value(x) -> str:
    """Shortest round-trip text for numbers; empty for missing values."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _digest(array: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(array, dtype=np.float64).tobytes()).hexdigest()[:16]


def run(
    topology: Topology,
    task: TaskInstance,
    schedule: Schedule,
    step_sizes: StepSizeSchedule,
    spec: PrivacySpec,
    master_seed: int,
    *,
    batch_fraction: float | None = None,
    init: str = "zeros",
    run_index: int = 0,
    stream_seeds: dict[str, int] | None = None,
    record_dispersion: bool = True,
    keep_vectors: bool = False,
    debug_invariants: bool = False,
    audit: bool = True,
    config_echo: dict | None = None,
) -> TrainTrace:
    """Execute the full training procedure and return its trace.

    ``spec`` may be :meth:`PrivacySpec.disabled` for the noise-free baseline.
    Identical arguments give bit-identical traces.
    """
    if task.topology is not topology and task.topology.to_dict() != topology.to_dict():
        raise ValueError("task was built for a different topology")
    if spec.enabled and spec.grad_bound != task.grad_bound:
        raise ValueError(
            f"privacy grad_bound={spec.grad_bound} differs from the task clipping norm {task.grad_bound}"
        )
    step_sizes.validate(schedule)
    q = spec.q if batch_fraction is None else batch_fraction
    etas = step_sizes.etas(schedule.K_g)
    plan = calibrate(spec, topology, schedule, etas)
    ledger = PrivacyLedger.for_plan(plan)

    streams = make_streams(master_seed, run_index, stream_seeds)
    seeds = {
        name: (stream_seeds or {}).get(name, stream_seed(master_seed, name, run_index))
        for name in STREAMS
    }
    seeds.update(master_seed=master_seed, run_index=run_index)
    M = task.model_dim
    if init == "zeros":
        w0 = np.zeros(M)
    elif init == "gaussian":
        w0 = streams["init"].normal(0.0, 0.01, size=M)
    else:
        raise ValueError(f"unknown init {init!r}")

    state = TrainState.broadcast(topology, w0)
    weights = weights_of(topology)
    loss_w = task.loss_weights
    N = topology.num_subnets
    sizes = topology.sizes
    bounds = schedule.boundaries
    batch_rng, noise_rng = streams["minibatch"], streams["noise"]

    rounds: list[RoundRecord] = []
    samples: list[DispersionSample] = []
    vectors: list[RoundVectors] = []
    local_events = [0] * N

    for k in range(K_g := schedule.K_g):
        eta = etas[k]
        tau = schedule.taus[k]
        start = state.global_model.copy()
        ev = tasks_mod.evaluate(task, start)
        if record_dispersion:
            samples.append(_sample(state, k))
        sens = [sensitivities(eta, tau, spec.grad_bound, int(s)) for s in sizes]
        local_at = schedule.local_instants(k)
        hasher = hashlib.sha256()
        grad_sum = np.zeros(M)
        step_grads = np.zeros((tau, M)) if keep_vectors else None
        local_noise_sum = np.zeros(M)
        local_noise_log: list[tuple[int, int, np.ndarray]] = []
        local_norms: list[float] = []

        for t in range(bounds[k] + 1, bounds[k + 1] + 1):
            state.t = t
            step_sum = np.zeros(M)
            for i in range(topology.num_devices):
                g, rows = _sgd_update(state, i, task, eta, batch_rng, q)
                hasher.update(rows.tobytes())
                step_sum += loss_w[i] * g
            grad_sum += eta * step_sum
            if keep_vectors:
                step_grads[t - bounds[k] - 1] = step_sum
            if t in local_at:
                for c in range(N):
                    try:
                        n = local_aggregate(state, c, plan, ledger, noise_rng, sens[c])
                    except BudgetError as exc:
                        raise RunError(str(exc), t, k, c, exc) from exc
                    local_events[c] += 1
                    local_noise_sum += weights.subnet_weight[c] * n
                    local_norms.append(float(np.linalg.norm(n)))
                    if keep_vectors:
                        local_noise_log.append((t, c, n.copy()))
                    if debug_invariants:
                        check_sync(state, c)
            if t == bounds[k + 1]:
                try:
                    gnoise = global_aggregate(state, plan, ledger, noise_rng, sens)
                except BudgetError as exc:
                    raise RunError(str(exc), t, k, None, exc) from exc
                if debug_invariants:
                    check_sync(state)
            elif record_dispersion:
                samples.append(_sample(state, k))

        gsum = weights.subnet_weight @ gnoise
        replay_error = 0.0
        if audit:
            replay = start - grad_sum + local_noise_sum + gsum
            replay_error = float(np.max(np.abs(replay - state.global_model)))
            if replay_error > REPLAY_TOLERANCE:
                raise RunError(
                    f"aggregation-path replay mismatch {replay_error:.3e}", state.t, k, None
                )
        if keep_vectors:
            vectors.append(RoundVectors(start, eta, step_grads, local_noise_log, gnoise.copy(), state.global_model.copy()))
        rounds.append(RoundRecord(
            k=k,
            t_k=bounds[k],
            loss=ev.loss,
            grad_norm_sq=ev.grad_norm_sq,
            accuracy=ev.accuracy,
            eta_k=eta,
            noise_l2_local_mean=float(np.mean(local_norms)) if local_norms else 0.0,
            noise_l2_global=float(np.linalg.norm(gsum)),
            model_digest=_digest(start),
            batch_digest=hasher.hexdigest()[:16],
            replay_error=replay_error,
        ))

    final = tasks_mod.evaluate(task, state.global_model)
    if record_dispersion:
        samples.append(_sample(state, K_g))
    return TrainTrace(
        config=config_echo or {},
        seeds=seeds,
        plan=plan,
        rounds=rounds,
        final=final,
        final_model=state.global_model.copy(),
        initial_model=w0,
        ledger=ledger,
        dispersion=samples,
        local_event_counts=local_events,
        vectors=vectors,
    )


def _sample(state: TrainState, k: int) -> DispersionSample:
    d = measure_dispersion(state.snapshot(copy=False))
    return DispersionSample(t=d.t, z1=d.z1, z2=d.z2, k=k)
