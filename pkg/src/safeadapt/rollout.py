"""Batch trajectory collection and advantage estimation for reward and cost.

Episodes are seeded independently (seed, episode index), so a batch is the same
set of trajectories whether episodes are collected sequentially or in parallel;
aggregation is an ordered reduction by episode index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .arm_env import (
    DomainInstance,
    DomainProfile,
    EnvConfig,
    env_reset,
    env_step,
    observe,
    reward_and_cost,
    sample_randomization,
)
from .nets import LOG_2PI, GaussianPolicy, MlpSpec, ParamVector, mlp_forward


class RolloutError(Exception):
    pass


def derive_rng(*keys: int) -> np.random.Generator:
    """Deterministic per-stream generator keyed by a tuple of nonnegative ints."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def derive_seed(*keys: int) -> int:
    """Collapse a key tuple to a single nonnegative int for nested derivation."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class GaeConfig:
    gamma: float = 0.99
    lambda_gae: float = 0.95
    normalize_advantages: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise RolloutError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0.0 <= self.lambda_gae <= 1.0:
            raise RolloutError(f"lambda_gae must be in [0, 1], got {self.lambda_gae}")


@dataclass
class Trajectory:
    """Per-step records of one episode."""

    observations: np.ndarray  # (L, obs_dim)
    actions: np.ndarray  # (L, act_dim)
    logprobs: np.ndarray  # (L,)
    rewards: np.ndarray  # (L,)
    costs: np.ndarray  # (L,)
    values_r: np.ndarray  # (L,)
    values_c: np.ndarray  # (L,)
    violated: bool
    target_id: int
    instance: DomainInstance

    @property
    def length(self) -> int:
        return int(self.rewards.shape[0])


@dataclass
class Batch:
    """A set of episodes with stacked per-step arrays and computed advantages."""

    trajectories: list[Trajectory]
    observations: np.ndarray
    actions: np.ndarray
    logprobs: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    advantages_r: np.ndarray
    advantages_c: np.ndarray
    returns_r: np.ndarray
    returns_c: np.ndarray
    slices: list[slice] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return int(self.rewards.shape[0])


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    terminal: bool,
    cfg: GaeConfig,
    bootstrap_value: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """GAE advantages and returns for one episode.

    The value past the last step is 0 when ``terminal``, else
    ``bootstrap_value``. Returns are advantages plus values.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape:
        raise RolloutError("rewards and values must have equal length")
    length = rewards.shape[0]
    adv = np.zeros(length)
    next_value = 0.0 if terminal else float(bootstrap_value)
    next_adv = 0.0
    for t in range(length - 1, -1, -1):
        delta = rewards[t] + cfg.gamma * next_value - values[t]
        next_adv = delta + cfg.gamma * cfg.lambda_gae * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


def _normalize(x: np.ndarray) -> np.ndarray:
    std = x.std()
    centered = x - x.mean()
    if std < 1e-8:
        return centered
    return centered / std


class _NetRuntime:
    """Cached layer views of a flat MLP for the per-step rollout loop."""

    __slots__ = ("weights", "biases")

    def __init__(self, params: ParamVector, spec: MlpSpec):
        self.weights = [params.block(f"w{i}") for i in range(spec.n_layers)]
        self.biases = [params.block(f"b{i}")[0] for i in range(spec.n_layers)]

    def forward1(self, x: np.ndarray) -> np.ndarray:
        h = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ w + b)
        return h @ self.weights[-1] + self.biases[-1]


def run_episode(
    policy: GaussianPolicy,
    instance: DomainInstance,
    env_cfg: EnvConfig,
    stochastic: bool,
    reward_source: str,
    rng: np.random.Generator,
) -> Trajectory:
    """Roll one episode. ``reward_source`` is 'true_state' or 'observation'.

    With 'observation', reward and cost are recomputed from the noisy post-step
    observation's distance instead of the simulator's true distance. Critic
    values are left zero here and filled in batched form by ``build_batch``.
    """
    if reward_source not in ("true_state", "observation"):
        raise RolloutError(f"unknown reward_source {reward_source!r}")
    net = _NetRuntime(policy.params, policy.spec)
    sigma = np.exp(policy.log_std)
    inv_sigma = np.exp(-policy.log_std)
    logp_const = -float(policy.log_std.sum()) - 0.5 * policy.action_dim * LOG_2PI
    from_observation = reward_source == "observation"

    state = env_reset(instance, env_cfg)
    obs = observe(state, instance, env_cfg, rng)
    observations, actions, logprobs = [], [], []
    rewards, costs = [], []
    violated = False
    while True:
        mu = net.forward1(obs)
        if stochastic:
            action = mu + sigma * rng.standard_normal(policy.action_dim)
        else:
            action = mu
        z = (action - mu) * inv_sigma
        logp = -0.5 * float(z @ z) + logp_const
        next_state, r, c, done, violated = env_step(state, action, instance, env_cfg)
        next_obs = observe(next_state, instance, env_cfg, rng)
        if from_observation:
            d_obs = math.sqrt(float(next_obs[0] ** 2 + next_obs[1] ** 2 + next_obs[2] ** 2))
            r, c = reward_and_cost(d_obs, violated, state.t, env_cfg.episode_len)
        observations.append(obs)
        actions.append(action)
        logprobs.append(logp)
        rewards.append(r)
        costs.append(c)
        state, obs = next_state, next_obs
        if done:
            break
    n = len(rewards)
    return Trajectory(
        observations=np.array(observations),
        actions=np.array(actions),
        logprobs=np.array(logprobs),
        rewards=np.array(rewards),
        costs=np.array(costs),
        values_r=np.zeros(n),
        values_c=np.zeros(n),
        violated=violated,
        target_id=instance.target_id,
        instance=instance,
    )


def collect_batch(
    policy: GaussianPolicy,
    critic_params: tuple[tuple[ParamVector, MlpSpec], tuple[ParamVector, MlpSpec]] | None,
    profile: DomainProfile,
    target_set: list[np.ndarray],
    target_ids: list[int],
    n_episodes: int,
    mode: str,
    reward_source: str,
    env_cfg: EnvConfig,
    gae_cfg: GaeConfig,
    seed: int,
) -> Batch:
    """Collect ``n_episodes`` episodes round-robin over ``target_ids``.

    Episode i uses the RNG stream keyed by (seed, i) for its randomization
    draw, observation noise, and action sampling.
    """
    if n_episodes < 1:
        raise RolloutError("n_episodes must be >= 1")
    if mode not in ("stochastic", "deterministic"):
        raise RolloutError(f"unknown mode {mode!r}")
    trajectories = []
    for i in range(n_episodes):
        rng = derive_rng(seed, i)
        tid = target_ids[i % len(target_ids)]
        instance = sample_randomization(profile, target_set, tid, rng)
        trajectories.append(
            run_episode(
                policy,
                instance,
                env_cfg,
                stochastic=(mode == "stochastic"),
                reward_source=reward_source,
                rng=rng,
            )
        )
    return build_batch(trajectories, gae_cfg, critic_params)


def build_batch(
    trajectories: list[Trajectory],
    gae_cfg: GaeConfig,
    critic_params: tuple[tuple[ParamVector, MlpSpec], tuple[ParamVector, MlpSpec]] | None = None,
) -> Batch:
    """Fill critic values, compute per-episode GAE for both channels, stack, normalize."""
    if not trajectories:
        raise RolloutError("empty trajectory list")
    if critic_params is not None:
        (pr, sr), (pc, sc) = critic_params
        for traj in trajectories:
            traj.values_r = mlp_forward(pr, sr, traj.observations)[:, 0]
            traj.values_c = mlp_forward(pc, sc, traj.observations)[:, 0]
    adv_r, adv_c, ret_r, ret_c, slices = [], [], [], [], []
    offset = 0
    for traj in trajectories:
        # Episodes end by violation or by reaching T; neither bootstraps.
        ar, rr = compute_gae(traj.rewards, traj.values_r, terminal=True, cfg=gae_cfg)
        ac, rc = compute_gae(traj.costs, traj.values_c, terminal=True, cfg=gae_cfg)
        adv_r.append(ar)
        adv_c.append(ac)
        ret_r.append(rr)
        ret_c.append(rc)
        slices.append(slice(offset, offset + traj.length))
        offset += traj.length
    advantages_r = np.concatenate(adv_r)
    advantages_c = np.concatenate(adv_c)
    if gae_cfg.normalize_advantages:
        advantages_r = _normalize(advantages_r)
        advantages_c = _normalize(advantages_c)
    return Batch(
        trajectories=trajectories,
        observations=np.concatenate([t.observations for t in trajectories]),
        actions=np.concatenate([t.actions for t in trajectories]),
        logprobs=np.concatenate([t.logprobs for t in trajectories]),
        rewards=np.concatenate([t.rewards for t in trajectories]),
        costs=np.concatenate([t.costs for t in trajectories]),
        advantages_r=advantages_r,
        advantages_c=advantages_c,
        returns_r=np.concatenate(ret_r),
        returns_c=np.concatenate(ret_c),
        slices=slices,
    )


def batch_stats(batch: Batch) -> dict[str, float]:
    """Averages over steps and episodes plus the violation rate.

    ``avg_timestep_cost`` is the episode-length-weighted mean, i.e. total cost
    over total steps, which is also the quantity the cost limit is compared
    against.
    """
    if not batch.trajectories:
        raise RolloutError("empty batch")
    n_steps = batch.n_steps
    n_eps = len(batch.trajectories)
    ep_rewards = [float(t.rewards.sum()) for t in batch.trajectories]
    ep_costs = [float(t.costs.sum()) for t in batch.trajectories]
    return {
        "avg_timestep_reward": float(batch.rewards.sum()) / n_steps,
        "avg_timestep_cost": float(batch.costs.sum()) / n_steps,
        "avg_episode_reward": sum(ep_rewards) / n_eps,
        "avg_episode_cost": sum(ep_costs) / n_eps,
        "violation_rate": sum(t.violated for t in batch.trajectories) / n_eps,
    }
