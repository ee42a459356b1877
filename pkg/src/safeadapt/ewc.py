"""Elastic weight consolidation: diagonal empirical Fisher and quadratic penalty.

The Fisher diagonal is the average of element-wise squared per-sample gradients
of the action log-likelihood, taken over a buffer of (observation, sampled
action) pairs collected by rolling out the current policy. The penalty anchors
policy parameters to a snapshot, weighted per parameter by that importance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .arm_env import DomainProfile, EnvConfig
from .nets import (
    GaussianPolicy,
    ParamVector,
    mlp_forward_cached,
    mlp_squared_grad_sums,
)


class EwcError(Exception):
    pass


@dataclass(frozen=True)
class EwcState:
    """Snapshot parameters, Fisher diagonal aligned to them, and penalty weight."""

    snapshot: ParamVector
    fisher: np.ndarray
    lam: float

    def __post_init__(self) -> None:
        fisher = np.asarray(self.fisher, dtype=np.float64)
        object.__setattr__(self, "fisher", fisher)
        if fisher.shape != (self.snapshot.size,):
            raise EwcError(
                f"fisher has {fisher.shape[0] if fisher.ndim == 1 else fisher.shape} "
                f"entries, snapshot has {self.snapshot.size}"
            )
        if np.any(fisher < 0.0):
            raise EwcError("fisher entries must be nonnegative")
        if self.lam < 0.0:
            raise EwcError(f"lambda must be >= 0, got {self.lam}")


@dataclass
class FisherBuffer:
    """Replay buffer of (observation, sampled action) pairs."""

    observations: np.ndarray  # (n, obs_dim)
    actions: np.ndarray  # (n, act_dim)

    def __post_init__(self) -> None:
        if self.observations.shape[0] != self.actions.shape[0]:
            raise EwcError("observations and actions must have the same length")

    @property
    def size(self) -> int:
        return int(self.observations.shape[0])


def estimate_fisher(policy: GaussianPolicy, buffer: FisherBuffer) -> np.ndarray:
    """Diagonal empirical Fisher over the buffer, aligned to ``policy.flat()``.

    F = (1/n) sum_i g_i * g_i with g_i the gradient of log pi(y_i | x_i) with
    respect to all policy parameters (mean net and log_std).
    """
    if buffer.size == 0:
        raise EwcError("fisher buffer is empty")
    n = buffer.size
    mu, acts = mlp_forward_cached(policy.params, policy.spec, buffer.observations)
    inv_var = np.exp(-2.0 * policy.log_std)
    dmu = (buffer.actions - mu) * inv_var
    net_sq = mlp_squared_grad_sums(policy.params, policy.spec, acts, dmu)
    z2 = ((buffer.actions - mu) ** 2) * inv_var
    log_std_sq = ((z2 - 1.0) ** 2).sum(axis=0)
    return np.concatenate([net_sq, log_std_sq]) / n


def ewc_penalty(p: ParamVector, state: EwcState) -> float:
    """(lambda/2) * sum_j F_j (p_j - snapshot_j)^2."""
    if p.size != state.snapshot.size:
        raise EwcError(f"parameter vector has {p.size} values, snapshot has "
                       f"{state.snapshot.size}")
    diff = p.values - state.snapshot.values
    return float(0.5 * state.lam * (state.fisher * diff * diff).sum())


def ewc_penalty_grad(p: ParamVector, state: EwcState) -> ParamVector:
    """lambda * F (p - snapshot), the analytic gradient of the penalty."""
    if p.size != state.snapshot.size:
        raise EwcError(f"parameter vector has {p.size} values, snapshot has "
                       f"{state.snapshot.size}")
    return p.with_values(state.lam * state.fisher * (p.values - state.snapshot.values))


def collect_fisher_buffer(
    policy: GaussianPolicy,
    profile: DomainProfile,
    target_set: list[np.ndarray],
    target_ids: list[int],
    n_steps: int,
    env_cfg: EnvConfig,
    seed: int,
) -> FisherBuffer:
    """Fill a buffer with at least ``n_steps`` pairs from stochastic rollouts.

    Episodes cycle round-robin over the targets; the buffer is truncated to
    exactly ``n_steps`` entries.
    """
    from .rollout import derive_rng, run_episode
    from .arm_env import sample_randomization

    obs_parts, act_parts = [], []
    collected = 0
    episode = 0
    while collected < n_steps:
        rng = derive_rng(seed, episode)
        tid = target_ids[episode % len(target_ids)]
        instance = sample_randomization(profile, target_set, tid, rng)
        traj = run_episode(
            policy, instance, env_cfg,
            stochastic=True, reward_source="true_state", rng=rng,
        )
        obs_parts.append(traj.observations)
        act_parts.append(traj.actions)
        collected += traj.length
        episode += 1
    observations = np.concatenate(obs_parts)[:n_steps]
    actions = np.concatenate(act_parts)[:n_steps]
    return FisherBuffer(observations=observations, actions=actions)


def take_snapshot(
    policy: GaussianPolicy,
    n_rollout_steps: int,
    profile: DomainProfile,
    target_set: list[np.ndarray],
    target_ids: list[int],
    env_cfg: EnvConfig,
    seed: int,
    lam: float = 1.0,
) -> EwcState:
    """Snapshot the current parameters and estimate their Fisher importance."""
    buffer = collect_fisher_buffer(
        policy, profile, target_set, target_ids, n_rollout_steps, env_cfg, seed
    )
    return EwcState(
        snapshot=policy.flat().copy(),
        fisher=estimate_fisher(policy, buffer),
        lam=lam,
    )
