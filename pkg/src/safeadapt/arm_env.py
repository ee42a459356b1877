"""2-DOF reach-and-balance environment with domain randomization.

The arm is a yaw joint (joint 1, rotation about world z) carrying a planar
elbow joint (joint 2). The agent commands joint velocities in [-1, 1] times the
velocity cap; each 100 ms control step integrates a velocity-servo law over
sub-intervals. An episode terminates either when a joint crosses its safety
rotation limit (a violation, which produces cost) or when the step budget T is
exhausted.

Randomization draws per-episode observation noise and the servo response
(stiffness/damping) from a domain profile, so the same policy faces systems
ranging from crisp trackers to heavily lagged ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class EnvError(Exception):
    """Raised for invalid environment usage (e.g. stepping a finished episode)."""


@dataclass(frozen=True)
class EnvConfig:
    """Physical and episode constants. Angles are radians internally."""

    dt: float = 0.1
    episode_len: int = 100
    v_max: float = math.radians(20.0)
    limit1: float = math.radians(150.0)
    limit2: float = math.radians(80.0)
    l1: float = 0.36
    l2: float = 0.42
    substeps: int = 10

    def __post_init__(self) -> None:
        if min(self.dt, self.v_max, self.limit1, self.limit2, self.l1, self.l2) <= 0:
            raise EnvError("all EnvConfig values must be positive")
        if self.episode_len < 1 or self.substeps < 1:
            raise EnvError("episode_len and substeps must be >= 1")


@dataclass(frozen=True)
class DomainProfile:
    """Ranges the per-episode randomization draws from."""

    name: str
    noise_pct_range: tuple[float, float]
    stiffness_range: tuple[float, float]
    damping_range: tuple[float, float]

    def __post_init__(self) -> None:
        for label, (lo, hi) in (
            ("noise_pct_range", self.noise_pct_range),
            ("stiffness_range", self.stiffness_range),
            ("damping_range", self.damping_range),
        ):
            if not (0.0 <= lo <= hi):
                raise EnvError(f"{label} must satisfy 0 <= lo <= hi, got ({lo}, {hi})")


@dataclass(frozen=True)
class DomainInstance:
    """One sampled realization of the randomization parameters plus the target."""

    noise_pct: float
    stiffness: float
    damping: float
    target_id: int
    target_pos: np.ndarray


@dataclass(frozen=True)
class ArmState:
    q1: float
    q2: float
    q1dot: float
    q2dot: float
    t: int
    target: np.ndarray


def forward_kinematics(q1: float, q2: float, cfg: EnvConfig) -> np.ndarray:
    """End-effector position: yaw rotation of the elbow plane about world z."""
    r = cfg.l2 * math.sin(q2)
    return np.array(
        [r * math.cos(q1), r * math.sin(q1), cfg.l1 + cfg.l2 * math.cos(q2)]
    )


def default_targets(cfg: EnvConfig) -> list[np.ndarray]:
    """Four reachable targets; the (-20 deg, 75 deg) one sits close to the joint-2 limit."""
    pairs_deg = [(-60.0, 65.0), (-20.0, 75.0), (20.0, 60.0), (60.0, 70.0)]
    return [
        forward_kinematics(math.radians(yaw), math.radians(q2), cfg)
        for yaw, q2 in pairs_deg
    ]


def targets_from_angles(pairs_deg: list[tuple[float, float]], cfg: EnvConfig) -> list[np.ndarray]:
    return [
        forward_kinematics(math.radians(yaw), math.radians(q2), cfg)
        for yaw, q2 in pairs_deg
    ]


def env_reset(instance: DomainInstance, cfg: EnvConfig) -> ArmState:
    """Upright start: both joints at 0, at rest, t = 0."""
    return ArmState(
        q1=0.0, q2=0.0, q1dot=0.0, q2dot=0.0, t=0, target=np.asarray(instance.target_pos)
    )


def reward_and_cost(d_t: float, violated: bool, t: int, big_t: int) -> tuple[float, float]:
    """Reward -d_t on safe steps; cost d_t * (T - t) on the violating step."""
    if d_t < 0:
        raise EnvError(f"distance must be nonnegative, got {d_t}")
    if not 0 <= t <= big_t:
        raise EnvError(f"step index {t} outside [0, {big_t}]")
    if violated:
        return 0.0, d_t * (big_t - t)
    return -d_t, 0.0


def env_step(
    s: ArmState,
    a_cmd: np.ndarray,
    inst: DomainInstance,
    cfg: EnvConfig,
) -> tuple[ArmState, float, float, bool, bool]:
    """Advance one control step.

    Commanded velocities are clip(a_cmd, -1, 1) * v_max. The joint servo
    follows q''_i = damping * (q'_cmd,i - q'_i) - stiffness * q'_i, the
    damping coefficient acting on the velocity error as in a drive-style
    velocity servo and the stiffness coefficient as parasitic drag. Each
    sub-interval updates velocity implicitly (unconditionally stable for the
    full randomization range) and position explicitly.

    Returns (next_state, reward, cost, done, violated). Limit crossings are
    checked after the full control step; the violating step pays cost
    d_t * (T - t) with t the index of the step being taken.
    """
    if s.t >= cfg.episode_len:
        raise EnvError("env_step called on a terminal state")
    u1 = min(max(float(a_cmd[0]), -1.0), 1.0) * cfg.v_max
    u2 = min(max(float(a_cmd[1]), -1.0), 1.0) * cfg.v_max

    h = cfg.dt / cfg.substeps
    gain = inst.damping
    drag = inst.stiffness
    denom = 1.0 + h * (gain + drag)
    q1, q2, v1, v2 = s.q1, s.q2, s.q1dot, s.q2dot
    for _ in range(cfg.substeps):
        v1 = (v1 + h * gain * u1) / denom
        v2 = (v2 + h * gain * u2) / denom
        q1 += h * v1
        q2 += h * v2

    violated = abs(q1) > cfg.limit1 or abs(q2) > cfg.limit2
    ee = forward_kinematics(q1, q2, cfg)
    diff = s.target - ee
    d_t = math.sqrt(float(diff @ diff))
    r, c = reward_and_cost(d_t, violated, s.t, cfg.episode_len)
    t_next = s.t + 1
    done = violated or t_next == cfg.episode_len
    next_state = ArmState(q1=q1, q2=q2, q1dot=v1, q2dot=v2, t=t_next, target=s.target)
    return next_state, r, c, done, violated


def observe(
    s: ArmState,
    inst: DomainInstance,
    cfg: EnvConfig,
    rng: np.random.Generator | None,
) -> np.ndarray:
    """Noisy 5-vector observation: per-axis signed distance to target, then q1, q2.

    Each component is scaled by (1 + u) with u ~ Uniform(-noise_pct, +noise_pct),
    drawn independently per component and call.
    """
    ee = forward_kinematics(s.q1, s.q2, cfg)
    obs = np.array(
        [s.target[0] - ee[0], s.target[1] - ee[1], s.target[2] - ee[2], s.q1, s.q2]
    )
    if rng is not None and inst.noise_pct != 0.0:
        obs *= 1.0 + rng.uniform(-inst.noise_pct, inst.noise_pct, size=5)
    return obs


def sample_randomization(
    profile: DomainProfile,
    target_set: list[np.ndarray],
    target_id: int,
    rng: np.random.Generator,
) -> DomainInstance:
    """Draw noise/stiffness/damping uniformly from the profile; target is fixed by id."""
    if not target_set:
        raise EnvError("target_set is empty")
    if not 0 <= target_id < len(target_set):
        raise EnvError(f"target_id {target_id} outside 0..{len(target_set) - 1}")
    noise = float(rng.uniform(*profile.noise_pct_range))
    stiffness = float(rng.uniform(*profile.stiffness_range))
    damping = float(rng.uniform(*profile.damping_range))
    return DomainInstance(
        noise_pct=noise,
        stiffness=stiffness,
        damping=damping,
        target_id=target_id,
        target_pos=np.asarray(target_set[target_id], dtype=np.float64),
    )
