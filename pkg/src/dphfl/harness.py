"""Configuration, run execution, scenario sweeps and summary emission."""

from __future__ import annotations

import json
import logging
import math
import os
import shutil
import sys
import tempfile
import uuid
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from dphfl import engine, tasks
from dphfl.analysis import (
    bound_constants,
    check_dispersion_bounds,
    theorem_report,
)
from dphfl.privacy import NoisePlan, PrivacySpec, calibrate
from dphfl.seeding import stream_seed
from dphfl.topology import Topology, build_topology

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = (
    "scenario", "axis_value", "seed", "final_loss", "final_accuracy",
    "lhs_cavg_gradnorm", "bound_a1", "bound_a2", "bound_b", "bound_satisfied",
)
AGGREGATE_COLUMNS = (
    "scenario", "axis_value", "runs", "final_loss_mean", "final_loss_std",
    "final_accuracy_mean", "final_accuracy_std",
)


class ConfigError(ValueError):
    pass


class OutputExistsError(ConfigError):
    pass


# ---------------------------------------------------------------------------
# Config schema
# ---------------------------------------------------------------------------


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TopologyConfig(_Section):
    num_subnets: int = Field(10, ge=1)
    devices_per_subnet: int = Field(5, ge=1)
    # explicit sizes override devices_per_subnet
    subnet_sizes: Optional[list[int]] = None
    trust_probability: float = Field(0.5, ge=0.0, le=1.0)
    # explicit flags override trust_probability
    trusted: Optional[list[bool]] = None

    @model_validator(mode="after")
    def _lengths(self):
        if self.subnet_sizes is not None:
            if len(self.subnet_sizes) != self.num_subnets:
                raise ValueError(f"subnet_sizes has {len(self.subnet_sizes)} entries, expected num_subnets={self.num_subnets}")
            if any(s < 1 for s in self.subnet_sizes):
                raise ValueError("subnet_sizes entries must be >= 1")
        if self.trusted is not None and len(self.trusted) != self.num_subnets:
            raise ValueError(f"trusted has {len(self.trusted)} entries, expected num_subnets={self.num_subnets}")
        return self

    def sizes(self) -> list[int]:
        return list(self.subnet_sizes) if self.subnet_sizes is not None else [self.devices_per_subnet] * self.num_subnets


class TaskConfig(_Section):
    kind: Literal["quadratic", "softmax", "image-softmax"] = "quadratic"
    model_dim: int = Field(10, ge=1)
    heterogeneity: float = Field(1.0, ge=0.0)
    points_per_device: int = Field(10, ge=1)
    point_spread: float = Field(0.5, ge=0.0)
    num_classes: int = Field(10, ge=2)
    samples_per_class: int = Field(300, ge=1)
    class_separation: float = 2.0
    labels_per_device: int = Field(3, ge=1)
    images_path: Optional[str] = None
    labels_path: Optional[str] = None

    @model_validator(mode="after")
    def _kind_fields(self):
        if self.kind != "quadratic":
            if self.labels_per_device > self.num_classes:
                raise ValueError(f"labels_per_device={self.labels_per_device} exceeds num_classes={self.num_classes}")
        if self.kind == "softmax" and self.model_dim % self.num_classes:
            raise ValueError(f"model_dim={self.model_dim} is not a multiple of num_classes={self.num_classes}")
        if self.kind == "image-softmax" and not (self.images_path and self.labels_path):
            raise ValueError("image-softmax needs images_path and labels_path")
        return self


class ScheduleConfig(_Section):
    global_rounds: int = Field(40, ge=1)
    tau_steps: int = Field(20, ge=1)
    local_period_steps: int = Field(5, ge=1)

    @model_validator(mode="after")
    def _schedule(self):
        try:
            engine.make_schedule(self.global_rounds, self.tau_steps, self.local_period_steps)
        except engine.ScheduleError as exc:
            raise ValueError(str(exc)) from None
        return self


class StepSizeConfig(_Section):
    gamma: float = Field(0.01, gt=0.0)
    # None: 1 for quadratic tasks, the softmax smoothness bound otherwise
    beta_estimate: Optional[float] = Field(None, gt=0.0)
    allow_above_cap: bool = False


class PrivacyConfig(_Section):
    enabled: bool = True
    epsilon_total: float = Field(1.0, gt=0.0)
    delta: float = Field(1e-5, gt=0.0, lt=1.0)
    batch_fraction: float = Field(0.1, gt=0.0, le=1.0)
    # None disables clipping, which is only allowed without DP
    grad_clip_norm: Optional[float] = Field(1.0, gt=0.0)
    c1: float = Field(1.0, gt=0.0)
    c2: float = Field(1.0, gt=0.0)
    v1: float = Field(1.0, gt=0.0)
    v2: float = Field(1.0, gt=0.0)

    @model_validator(mode="after")
    def _clip(self):
        if self.enabled and self.grad_clip_norm is None:
            raise ValueError("grad_clip_norm is required when privacy is enabled")
        return self


class AnalysisConfig(_Section):
    enabled: bool = True
    probe_models: int = Field(3, ge=1)
    probe_pairs: int = Field(4, ge=1)
    fstar_reference_steps: int = Field(200, ge=1)


class RunConfig(_Section):
    master_seed: int = Field(0, ge=0)
    repeat_count: int = Field(1, ge=1)
    output_dir: Optional[str] = None
    init_model: Literal["zeros", "gaussian"] = "zeros"
    topology: TopologyConfig = TopologyConfig()
    task: TaskConfig = TaskConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    step_size: StepSizeConfig = StepSizeConfig()
    privacy: PrivacyConfig = PrivacyConfig()
    analysis: AnalysisConfig = AnalysisConfig()

    def echo(self) -> dict:
        return self.model_dump(mode="json")

    def with_updates(self, **sections) -> "RunConfig":
        """Copy with nested keys replaced, re-running every validator."""
        data = self.echo()
        for key, value in sections.items():
            if isinstance(value, dict):
                data[key] = {**data[key], **value}
            else:
                data[key] = value
        return config_from_dict(data)


class NetworkValue(_Section):
    num_subnets: int = Field(ge=1)
    devices_per_subnet: int = Field(ge=1)


AXES = ("p_c", "epsilon", "network_config", "baseline")


class SweepConfig(_Section):
    axis: Literal["p_c", "epsilon", "network_config", "baseline"]
    values: list[Union[NetworkValue, float, str]]

    @model_validator(mode="after")
    def _values(self):
        if not self.values:
            raise ValueError("values must be non-empty")
        for v in self.values:
            if self.axis == "network_config":
                ok = isinstance(v, NetworkValue)
            elif self.axis == "baseline":
                ok = v == "dp_off" or (isinstance(v, float) and 0.0 <= v <= 1.0)
            elif self.axis == "p_c":
                ok = isinstance(v, float) and 0.0 <= v <= 1.0
            else:
                ok = isinstance(v, float) and v > 0
            if not ok:
                raise ValueError(f"value {v!r} is not valid for axis {self.axis}")
        return self


class Scenario(_Section):
    name: str = Field(min_length=1)
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4], min_length=1)
    sweep: SweepConfig
    base: RunConfig = RunConfig()

    def runs(self) -> list[tuple[str, int, RunConfig]]:
        """The (axis_value, seed, config) run set in deterministic order."""
        out = []
        for value in self.sweep.values:
            label, cfg = apply_axis(self.base, self.sweep.axis, value)
            for seed in self.seeds:
                out.append((label, seed, cfg.with_updates(master_seed=seed)))
        return out


def apply_axis(base: RunConfig, axis: str, value) -> tuple[str, RunConfig]:
    if axis == "p_c":
        return engine.format_value(value), base.with_updates(topology={"trust_probability": value, "trusted": None})
    if axis == "epsilon":
        return engine.format_value(value), base.with_updates(privacy={"epsilon_total": value, "enabled": True})
    if axis == "network_config":
        label = f"N={value.num_subnets};s={value.devices_per_subnet}"
        return label, base.with_updates(topology={
            "num_subnets": value.num_subnets, "devices_per_subnet": value.devices_per_subnet,
            "subnet_sizes": None, "trusted": None,
        })
    if axis == "baseline":
        if value == "dp_off":
            return "dp_off", base.with_updates(privacy={"enabled": False})
        return f"p_c={engine.format_value(value)}", base.with_updates(
            topology={"trust_probability": value, "trusted": None}, privacy={"enabled": True}
        )
    raise ConfigError(f"unknown axis {axis!r}")


def _format_validation(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "; ".join(lines)


def config_from_dict(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None


def _load_mapping(path: Path) -> dict:
    if not path.is_file():
        raise ConfigError(f"{path}: no such file")
    try:
        if path.suffix == ".json":
            return json.loads(path.read_text())
        with path.open("rb") as fh:
            return tomllib.load(fh)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: malformed file: {exc}") from None


def parse_config(path: str | Path) -> RunConfig:
    """Read a TOML (or echoed JSON) run configuration."""
    return config_from_dict(_load_mapping(Path(path)))


def parse_scenario(path: str | Path) -> Scenario:
    """Read a scenario file; ``base_config`` may point at a run config file."""
    path = Path(path)
    data = dict(_load_mapping(path))
    base_file = data.pop("base_config", None)
    if base_file is not None:
        if "base" in data:
            raise ConfigError("give either base_config or a [base] table, not both")
        data["base"] = _load_mapping(path.parent / base_file)
    try:
        return Scenario.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None


# ---------------------------------------------------------------------------
# Building and executing runs
# ---------------------------------------------------------------------------


@dataclass
class RunInputs:
    topology: Topology
    task: tasks.TaskInstance
    schedule: engine.Schedule
    steps: engine.StepSizeSchedule
    spec: PrivacySpec
    batch_fraction: float


def _topology(cfg: RunConfig, seed: int, run_index: int) -> Topology:
    t = cfg.topology
    trust = list(t.trusted) if t.trusted is not None else t.trust_probability
    return build_topology(t.num_subnets, t.sizes(), trust, seed=stream_seed(seed, "trust", run_index))


def _spec(cfg: RunConfig, q: float) -> PrivacySpec:
    p = cfg.privacy
    G = p.grad_clip_norm if p.grad_clip_norm is not None else math.inf
    if not p.enabled:
        return PrivacySpec.disabled(q, G)
    return PrivacySpec(p.epsilon_total, p.delta, q, G, p.c1, p.c2, p.v1, p.v2)


def build_run(cfg: RunConfig, run_index: int = 0) -> RunInputs:
    """Materialise topology, task, schedule, step sizes and privacy spec."""
    seed = cfg.master_seed
    topo = _topology(cfg, seed, run_index)
    t = cfg.task
    G = cfg.privacy.grad_clip_norm if cfg.privacy.grad_clip_norm is not None else math.inf
    data_seed = stream_seed(seed, "data", run_index)
    try:
        if t.kind == "quadratic":
            task = tasks.make_quadratic(
                t.model_dim, topo.num_devices, t.heterogeneity, data_seed, topology=topo,
                points_per_device=t.points_per_device, point_spread=t.point_spread, grad_bound=G,
            )
        else:
            if t.kind == "softmax":
                data = tasks.make_softmax(t.model_dim, t.num_classes, t.samples_per_class, t.class_separation, data_seed)
            else:
                data = tasks.load_idx_images(t.images_path, t.labels_path)
                if data.num_classes * data.features.shape[1] != t.model_dim:
                    raise ConfigError(
                        f"task.model_dim={t.model_dim} but the image data implies "
                        f"{data.num_classes * data.features.shape[1]}"
                    )
            shards = tasks.partition_noniid(data, topo, t.labels_per_device, stream_seed(seed, "partition", run_index))
            task = tasks.softmax_task(shards, topo, G, kind=t.kind)
    except (tasks.DatasetError, tasks.PartitionError, OSError) as exc:
        raise ConfigError(f"task: {exc}") from None

    s = cfg.schedule
    schedule = engine.make_schedule(s.global_rounds, s.tau_steps, s.local_period_steps)
    beta = cfg.step_size.beta_estimate
    if beta is None:
        beta = 1.0 if t.kind == "quadratic" else tasks.softmax_smoothness_bound(task)
    steps = engine.StepSizeSchedule(cfg.step_size.gamma, beta, cfg.step_size.allow_above_cap)
    try:
        steps.validate(schedule)
    except engine.StepSizeError as exc:
        raise ConfigError(f"step_size.gamma: {exc}") from None
    q = cfg.privacy.batch_fraction
    spec = _spec(cfg, tasks.realized_sampling_fraction(task, q))
    return RunInputs(topo, task, schedule, steps, spec, q)


def preflight(cfg: RunConfig, run_index: int = 0) -> NoisePlan:
    """Cheap budget check that does not build the task.

    Uses the configured sampling fraction, which is never above the realised
    one, so a config accepted here also passes inside the run.
    """
    topo = _topology(cfg, cfg.master_seed, run_index)
    s = cfg.schedule
    schedule = engine.make_schedule(s.global_rounds, s.tau_steps, s.local_period_steps)
    etas = [engine.step_size(k, engine.StepSizeSchedule(cfg.step_size.gamma, 1.0, True)) for k in range(schedule.K_g)]
    return calibrate(_spec(cfg, cfg.privacy.batch_fraction), topo, schedule, etas)


_FSTAR_CACHE: dict[tuple, float] = {}


def reference_min_loss(task: tasks.TaskInstance, steps: int, lr: float, key: tuple | None = None) -> float:
    """Lowest loss seen along noise-free full-gradient descent from zero."""
    if key is not None and key in _FSTAR_CACHE:
        return _FSTAR_CACHE[key]
    w = np.zeros(task.model_dim)
    best = math.inf
    weights = task.loss_weights
    for _ in range(steps):
        grad = sum(wt * tasks.device_gradient(task, i, w) for i, wt in enumerate(weights))
        w = w - lr * grad
        best = min(best, tasks.evaluate(task, w).loss)
    if key is not None:
        _FSTAR_CACHE[key] = best
    return best


def analyze_run(cfg: RunConfig, inputs: RunInputs, trace: engine.TrainTrace) -> dict:
    """Bound constants, convergence bound terms and the dispersion check."""
    task = inputs.task
    if task.kind == "quadratic":
        props = tasks.estimate_properties(task, [trace.initial_model], 1, 0, q=inputs.batch_fraction)
        f_star, source = tasks.evaluate(task, task.optimum).loss, "analytic"
    else:
        rng = np.random.default_rng(stream_seed(cfg.master_seed, "probe"))
        probes = [trace.initial_model, trace.final_model]
        probes += [rng.normal(0.0, 0.1, task.model_dim) for _ in range(max(0, cfg.analysis.probe_models - 2))]
        props = tasks.estimate_properties(
            task, probes[: max(1, cfg.analysis.probe_models)], cfg.analysis.probe_pairs,
            stream_seed(cfg.master_seed, "probe"), q=inputs.batch_fraction,
        )
        key = (json.dumps(cfg.topology.model_dump(mode="json"), sort_keys=True),
               json.dumps(cfg.task.model_dump(mode="json"), sort_keys=True), cfg.master_seed)
        ref = reference_min_loss(task, cfg.analysis.fstar_reference_steps, 1.0 / inputs.steps.beta_estimate, key)
        observed = min([r.loss for r in trace.rounds] + [trace.final.loss])
        f_star, source = min(ref, observed), "reference-run-minimum"

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        constants = bound_constants(
            props, inputs.spec.grad_bound, inputs.spec.q, task.model_dim,
            inputs.schedule, inputs.spec, inputs.topology, inputs.steps.gamma,
        )
    theorem = theorem_report(trace, constants, gamma=inputs.steps.gamma, f_star=f_star, f_star_source=source)
    dispersion = check_dispersion_bounds(trace, constants, inputs.schedule)
    return {
        "properties": props.to_dict(),
        "bound_constants": constants.to_dict(),
        "theorem": theorem.to_dict(),
        "dispersion": dispersion.to_dict(),
    }


@dataclass
class RunResult:
    axis_value: str
    seed: int
    trace: engine.TrainTrace
    report: dict | None
    config: RunConfig
    run_index: int = 0

    def summary_row(self, scenario: str) -> dict:
        th = (self.report or {}).get("theorem", {})
        return {
            "scenario": scenario,
            "axis_value": self.axis_value,
            "seed": self.seed,
            "final_loss": self.trace.final.loss,
            "final_accuracy": self.trace.final.accuracy,
            "lhs_cavg_gradnorm": self.trace.lhs_cumulative_average(),
            "bound_a1": th.get("term_a1"),
            "bound_a2": th.get("term_a2"),
            "bound_b": th.get("term_b"),
            "bound_satisfied": th.get("satisfied"),
        }

    def write(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "config.json").write_text(engine.dump_json(self.config.echo()))
        self.trace.write(directory)
        if self.report is not None:
            (directory / "report.json").write_text(engine.dump_json(self.report))


def execute_run(
    cfg: RunConfig,
    run_index: int = 0,
    axis_value: str = "",
    debug_invariants: bool = False,
) -> RunResult:
    inputs = build_run(cfg, run_index)
    trace = engine.run(
        inputs.topology, inputs.task, inputs.schedule, inputs.steps, inputs.spec, cfg.master_seed,
        batch_fraction=inputs.batch_fraction, init=cfg.init_model, run_index=run_index,
        debug_invariants=debug_invariants, config_echo=cfg.echo(),
    )
    report = analyze_run(cfg, inputs, trace) if cfg.analysis.enabled else None
    return RunResult(axis_value, cfg.master_seed, trace, report, cfg, run_index)


def _job(args) -> RunResult:
    cfg_dict, run_index, label, debug = args
    return execute_run(config_from_dict(cfg_dict), run_index, label, debug)


def _execute_all(jobs: list[tuple[RunConfig, int, str]], n_jobs: int, debug: bool) -> list[RunResult]:
    payload = [(cfg.echo(), idx, label, debug) for cfg, idx, label in jobs]
    if n_jobs <= 1 or len(payload) <= 1:
        return [_job(p) for p in payload]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(_job, payload))


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def default_output(name: str, cfg_dir: str | None = None) -> Path:
    if cfg_dir:
        return Path(cfg_dir)
    return Path(os.environ.get("DPHFL_OUT_DIR", "runs")) / name


def _commit(tmp: Path, target: Path, force: bool) -> None:
    """Move a fully written directory into place, replacing atomically."""
    if target.exists():
        if not force:
            shutil.rmtree(tmp)
            raise OutputExistsError(f"{target} exists; pass --force to overwrite")
        old = target.with_name(f".{target.name}.old-{uuid.uuid4().hex[:8]}")
        target.rename(old)
        tmp.rename(target)
        shutil.rmtree(old)
    else:
        tmp.rename(target)


def _staging(target: Path, force: bool) -> Path:
    if target.exists() and not force:
        raise OutputExistsError(f"{target} exists; pass --force to overwrite")
    target.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f".{target.name}.tmp-", dir=target.parent))


def emit_summary(results: list[RunResult], scenario: str, path: str | Path) -> Path:
    """Write one CSV row per run with the columns in ``SUMMARY_COLUMNS``."""
    lines = [",".join(SUMMARY_COLUMNS)]
    for r in results:
        row = r.summary_row(scenario)
        if not r.config.privacy.enabled and row["bound_b"] is None:
            row["bound_b"] = 0.0
        lines.append(",".join(_cell(row[c]) for c in SUMMARY_COLUMNS))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def _cell(x) -> str:
    if isinstance(x, str):
        return x
    return engine.format_value(x)


def emit_aggregate(results: list[RunResult], scenario: str, path: str | Path) -> Path:
    groups: dict[str, list[RunResult]] = {}
    for r in results:
        groups.setdefault(r.axis_value, []).append(r)
    lines = [",".join(AGGREGATE_COLUMNS)]
    for label, rs in groups.items():
        loss = np.array([r.trace.final.loss for r in rs])
        acc = [r.trace.final.accuracy for r in rs]
        acc = np.array(acc, dtype=float) if all(a is not None for a in acc) else None
        std = lambda a: float(np.std(a, ddof=1)) if len(a) > 1 else 0.0
        cells = [
            scenario, label, str(len(rs)),
            engine.format_value(float(loss.mean())), engine.format_value(std(loss)),
            "" if acc is None else engine.format_value(float(acc.mean())),
            "" if acc is None else engine.format_value(std(acc)),
        ]
        lines.append(",".join(cells))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def run_config(
    cfg: RunConfig,
    out: str | Path,
    *,
    force: bool = False,
    jobs: int = 1,
    debug_invariants: bool = False,
    name: str = "run",
) -> tuple[Path, list[RunResult]]:
    """Execute ``repeat_count`` runs of one config into ``out``."""
    target = Path(out)
    for r in range(cfg.repeat_count):
        preflight(cfg, r)
    staging = _staging(target, force)
    try:
        results = _execute_all([(cfg, r, "") for r in range(cfg.repeat_count)], jobs, debug_invariants)
        for res in results:
            sub = staging if cfg.repeat_count == 1 else staging / f"rep-{res.run_index}"
            res.write(sub)
        emit_summary(results, name, staging / "summary.csv")
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    _commit(staging, target, force)
    return target, results


def run_scenario(
    scenario: Scenario,
    out: str | Path | None = None,
    *,
    force: bool = False,
    jobs: int = 1,
    debug_invariants: bool = False,
) -> tuple[Path, list[RunResult]]:
    """Run every (value, seed) pair; write traces, reports and summary CSVs."""
    target = Path(out) if out is not None else default_output(scenario.name, scenario.base.output_dir)
    runs = scenario.runs()
    for _, _, cfg in runs:
        preflight(cfg)
    staging = _staging(target, force)
    try:
        results = _execute_all([(cfg, 0, label) for label, _, cfg in runs], jobs, debug_invariants)
        for res in results:
            res.write(staging / _safe(res.axis_value) / f"seed-{res.seed}")
        emit_summary(results, scenario.name, staging / "summary.csv")
        emit_aggregate(results, scenario.name, staging / "aggregate.csv")
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    _commit(staging, target, force)
    return target, results


def _safe(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "._-=" else "_" for ch in label) or "run"


def reanalyze(trace_dir: str | Path) -> tuple[dict, bool]:
    """Regenerate a run from its echoed config and compare the trace bytes."""
    trace_dir = Path(trace_dir)
    cfg = parse_config(trace_dir / "config.json")
    header = json.loads((trace_dir / "trace.json").read_text())
    run_index = int(header["seeds"].get("run_index", 0))
    result = execute_run(cfg.with_updates(analysis={"enabled": True}), run_index)
    reproduced = (
        (trace_dir / "trace.csv").read_text() == result.trace.csv_text()
        and (trace_dir / "trace.json").read_text() == engine.dump_json(result.trace.header())
    )
    return result.report, reproduced

