"""Scenario files: world geometry plus a key=value parameter block.

One text file fully determines a run: `bounds`/`box` lines describe the
arena, `key = value` lines set agents, sensor, graph, planner, network and
loop parameters. Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dtg import DtgConfig
from .planner import PlannerConfig
from .world import (
    AgentPose,
    GroundTruthWorld,
    SensorModel,
    WorldParseError,
    WorldValidationError,
    parse_world,
)


@dataclass
class ScenarioConfig:
    world: GroundTruthWorld
    starts: list  # AgentPose per agent
    sensor: SensorModel = field(default_factory=SensorModel)
    dtg: DtgConfig = field(default_factory=DtgConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    resolution: float = 0.2
    seed: int = 0
    dt: float = 0.1
    partition_hz: float = 2.0
    coverage_target: float = 0.95
    time_limit: float = 300.0
    latency: float = 0.0
    jitter: float = 0.0
    drop: float = 0.0
    baseline: bool = True
    consistency_checks: bool = False
    keep_msg_log: bool = False

    @property
    def n_agents(self) -> int:
        return len(self.starts)

    def validate(self):
        if not self.starts:
            raise WorldValidationError("scenario defines no agent starts")
        if self.dt <= 0:
            raise WorldValidationError("dt must be positive")
        if not (0 < self.coverage_target <= 1):
            raise WorldValidationError("coverage target must lie in (0, 1]")
        if self.partition_hz <= 0:
            raise WorldValidationError("partition frequency must be positive")
        clearance = self.resolution * math.sqrt(3)
        for i, pose in enumerate(self.starts):
            p = pose.position
            if not self.world.bounds.contains_point(p):
                raise WorldValidationError(f"start {i} outside world bounds")
            for ob in self.world.obstacles:
                lo = np.asarray(ob.lo) - clearance
                hi = np.asarray(ob.hi) + clearance
                if np.all(p >= lo) and np.all(p <= hi):
                    raise WorldValidationError(f"start {i} too close to an obstacle")
        for i in range(len(self.starts)):
            for j in range(i + 1, len(self.starts)):
                d = float(np.linalg.norm(self.starts[i].position - self.starts[j].position))
                if d < 1.0:
                    raise WorldValidationError(f"starts {i} and {j} closer than 1 m")
        return self


_FLOAT_KEYS = {
    "resolution", "dt", "partition_hz", "coverage_target", "time_limit",
    "latency", "jitter", "drop",
    "r_max", "fov_theta_left", "fov_theta_right", "fov_phi_up", "fov_phi_down",
    "delta_theta", "delta_phi",
    "d_max", "p_th", "g_th", "e_th", "eroi_side",
    "n_tau", "g_l", "lambda", "vel_max",
}
_INT_KEYS = {"seed", "agents", "vp_azimuths"}
_BOOL_KEYS = {"baseline"}


def _parse_bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise WorldParseError(f"expected on/off, got {raw!r}")


def parse_scenario(path) -> ScenarioConfig:
    text = Path(path).read_text()
    return parse_scenario_text(text, name=str(path))


def parse_scenario_text(text: str, name: str = "<string>") -> ScenarioConfig:
    world = parse_world(text, name=name)
    params: dict = {}
    starts: list[AgentPose] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line or "=" not in line:
            continue
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key == "start":
            nums = [float(v) for v in value.split()]
            if len(nums) not in (3, 4):
                raise WorldParseError(f"{name}:{lineno}: start needs x y z [yaw]")
            yaw = nums[3] if len(nums) == 4 else 0.0
            starts.append(AgentPose(np.array(nums[:3]), yaw))
        elif key in _FLOAT_KEYS:
            params[key] = float(value)
        elif key in _INT_KEYS:
            params[key] = int(value)
        elif key in _BOOL_KEYS:
            params[key] = _parse_bool(value)
        else:
            raise WorldParseError(f"{name}:{lineno}: unknown parameter {key!r}")

    n_agents = params.pop("agents", len(starts))
    if n_agents > len(starts):
        raise WorldParseError(f"{name}: {n_agents} agents requested but only {len(starts)} starts given")
    starts = starts[:n_agents]

    sensor = SensorModel(
        fov_theta_left=params.pop("fov_theta_left", 57.3),
        fov_theta_right=params.pop("fov_theta_right", -57.3),
        fov_phi_up=params.pop("fov_phi_up", 45.0),
        fov_phi_down=params.pop("fov_phi_down", -45.0),
        r_max=params.pop("r_max", 5.0),
        delta_theta=params.pop("delta_theta", 7.5),
        delta_phi=params.pop("delta_phi", 7.5),
    )
    dtg = DtgConfig(
        d_max=params.pop("d_max", 10.0),
        p_th=params.pop("p_th", 5.5),
        g_th=params.pop("g_th", 1.3),
        e_th=params.pop("e_th", 0.85),
        eroi_side=params.pop("eroi_side", 5.0),
        vp_azimuths=params.pop("vp_azimuths", 8),
    )
    planner = PlannerConfig(
        n_tau=params.pop("n_tau", 0.2),
        g_l=params.pop("g_l", 0.08),
        lam=params.pop("lambda", 0.1),
        vel_max=params.pop("vel_max", 1.5),
    )
    cfg = ScenarioConfig(
        world=world,
        starts=starts,
        sensor=sensor,
        dtg=dtg,
        planner=planner,
        resolution=params.pop("resolution", 0.2),
        seed=params.pop("seed", 0),
        dt=params.pop("dt", 0.1),
        partition_hz=params.pop("partition_hz", 2.0),
        coverage_target=params.pop("coverage_target", 0.95),
        time_limit=params.pop("time_limit", 300.0),
        latency=params.pop("latency", 0.0),
        jitter=params.pop("jitter", 0.0),
        drop=params.pop("drop", 0.0),
        baseline=params.pop("baseline", True),
    )
    return cfg.validate()


def with_overrides(cfg: ScenarioConfig, *, seed=None, agents=None, time_limit=None,
                   coverage=None, baseline=None) -> ScenarioConfig:
    """Apply CLI-level overrides on top of a parsed scenario."""
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if time_limit is not None:
        changes["time_limit"] = time_limit
    if coverage is not None:
        changes["coverage_target"] = coverage
    if baseline is not None:
        changes["baseline"] = baseline
    if agents is not None:
        if agents > len(cfg.starts):
            raise WorldValidationError(f"{agents} agents requested but scenario has {len(cfg.starts)} starts")
        changes["starts"] = cfg.starts[:agents]
    out = replace(cfg, **changes)
    return out.validate()
