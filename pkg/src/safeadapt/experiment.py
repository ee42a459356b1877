"""Experiment protocol: pretraining, sequential adaptation, evaluation, analysis.

Pretraining runs the staged constrained optimizer over all targets under wide
randomization and ends by snapshotting the policy and its Fisher importance.
Adaptation then visits one target at a time in the transfer domain under one
of five strategies; after each target the policy is snapshotted so it can be
evaluated on the target it just adapted to (Current), the remaining targets
(Others), and the whole set (Combined).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from . import checkpoint as ckpt_mod
from .arm_env import DomainProfile, EnvConfig, sample_randomization
from .checkpoint import Checkpoint
from .config import ExperimentConfig
from .ewc import EwcState, take_snapshot
from .metrics import MetricsRow
from .nets import GaussianPolicy, MlpSpec, ParamVector, mlp_init, policy_layout
from .pcrpo import AgentState, Critic, pcrpo_update
from .rollout import batch_stats, collect_batch, derive_rng, derive_seed, run_episode


class ExperimentError(Exception):
    pass


# Stream labels for deterministic seed derivation.
_INIT, _PRETRAIN, _FISHER, _ADAPT, _EVAL = 0, 1, 2, 3, 4


class Strategy(enum.Enum):
    ZS = "zs"
    DA = "da"
    SDA = "sda"
    CDA = "cda"
    SCDA = "scda"


# strategy -> (safety_enabled, use_ewc)
STRATEGY_SEMANTICS: dict[Strategy, tuple[bool, bool]] = {
    Strategy.ZS: (False, False),
    Strategy.DA: (False, False),
    Strategy.SDA: (True, False),
    Strategy.CDA: (False, True),
    Strategy.SCDA: (True, True),
}


@dataclass
class RunRecord:
    strategy: Strategy
    seed: int
    domain: str
    rows: list[MetricsRow]
    snapshots: list[ParamVector]  # combined policy layout, one per adapted target
    target_sequence: tuple[int, ...]
    final_agent: AgentState


@dataclass(frozen=True)
class TargetEval:
    episode_reward: float
    episode_cost: float

    @property
    def total(self) -> float:
        return self.episode_reward - self.episode_cost


def _init_agent(cfg: ExperimentConfig, seed: int) -> AgentState:
    obs_dim, act_dim = 5, 2
    policy_spec = MlpSpec(obs_dim, cfg.hidden_dims, act_dim)
    critic_spec = MlpSpec(obs_dim, cfg.hidden_dims, 1)
    policy = GaussianPolicy(
        spec=policy_spec,
        params=mlp_init(policy_spec, derive_seed(seed, _INIT, 0)),
        log_std=np.full(act_dim, math.log(cfg.std_init)),
    )
    critic_r = Critic(spec=critic_spec, params=mlp_init(critic_spec, derive_seed(seed, _INIT, 1)))
    critic_c = Critic(spec=critic_spec, params=mlp_init(critic_spec, derive_seed(seed, _INIT, 2)))
    return AgentState(policy=policy, critic_r=critic_r, critic_c=critic_c)


def _row(
    run_id: str,
    seed: int,
    strategy: str,
    phase: str,
    iteration: int,
    target_id: int,
    stats_d: dict[str, float],
    j_c: float,
    stage: str,
) -> MetricsRow:
    return MetricsRow(
        run_id=run_id,
        seed=seed,
        strategy=strategy,
        phase=phase,
        iteration=iteration,
        target_id=target_id,
        avg_timestep_reward=stats_d["avg_timestep_reward"],
        avg_timestep_cost=stats_d["avg_timestep_cost"],
        total=stats_d["avg_timestep_reward"] - stats_d["avg_timestep_cost"],
        j_c=j_c,
        stage=stage,
        violation_rate=stats_d["violation_rate"],
    )


def _guarded_update(agent, batch, pcfg, ewc, safety_enabled):
    """Run one update; on numerical blowup keep the previous iterate."""
    try:
        return pcrpo_update(agent, batch, pcfg, ewc=ewc, safety_enabled=safety_enabled), True
    except Exception as exc:
        from .pcrpo import PcrpoError

        if isinstance(exc, PcrpoError) and "non-finite" in str(exc):
            return (agent, None), False
        raise


def pretrain(
    cfg: ExperimentConfig, seed: int, progress: bool = False
) -> tuple[Checkpoint, list[MetricsRow]]:
    """Train from scratch across all targets, then snapshot params and Fisher."""
    agent = _init_agent(cfg, seed)
    profile = cfg.profile(cfg.pretrain.profile)
    targets = cfg.targets()
    target_ids = list(range(len(targets)))
    run_id = f"pretrain-s{seed}"
    rows: list[MetricsRow] = []
    for it in range(cfg.pretrain.iterations):
        batch = collect_batch(
            agent.policy,
            agent.critic_param_tuple(),
            profile,
            targets,
            target_ids,
            cfg.pretrain.episodes_per_batch,
            mode="stochastic",
            reward_source=cfg.pretrain.reward_source,
            env_cfg=cfg.env,
            gae_cfg=cfg.gae,
            seed=derive_seed(seed, _PRETRAIN, it),
        )
        (agent, diag), ok = _guarded_update(agent, batch, cfg.pcrpo, None, True)
        stats_d = batch_stats(batch)
        stage = diag.stage.label() if ok else "aborted"
        j_c = diag.j_c if ok else stats_d["avg_timestep_cost"]
        rows.append(_row(run_id, seed, "-", "pretrain", it, -1, stats_d, j_c, stage))
        if progress and (it % 10 == 0 or it == cfg.pretrain.iterations - 1):
            print(
                f"[pretrain s{seed} {it:03d}] reward={stats_d['avg_timestep_reward']:.3f} "
                f"cost={stats_d['avg_timestep_cost']:.3f} stage={stage}"
            )
    ewc_state = take_snapshot(
        agent.policy,
        cfg.fisher_buffer_steps,
        profile,
        targets,
        target_ids,
        cfg.env,
        seed=derive_seed(seed, _FISHER),
        lam=cfg.ewc_lambda,
    )
    ckpt = ckpt_mod.from_agent(
        agent,
        fisher=ewc_state.fisher,
        snapshot=ewc_state.snapshot.values,
        config_hash=cfg.config_hash(),
        seed=seed,
        phase="pretrain",
    )
    return ckpt, rows


def adapt(
    ckpt: Checkpoint,
    strategy: Strategy,
    cfg: ExperimentConfig,
    seed: int,
    domain: str | None = None,
    progress: bool = False,
) -> RunRecord:
    """Sequentially adapt the checkpointed policy to each target in the domain."""
    domain = domain or cfg.adapt.profile
    profile = cfg.profile(domain)
    targets = cfg.targets()
    agent = ckpt.agent()
    sequence = cfg.adapt.target_sequence
    flat_layout = policy_layout(agent.policy.spec)

    if strategy is Strategy.ZS:
        snapshots = [agent.policy.flat().copy() for _ in sequence]
        return RunRecord(
            strategy=strategy,
            seed=seed,
            domain=domain,
            rows=[],
            snapshots=snapshots,
            target_sequence=sequence,
            final_agent=agent,
        )

    safety_enabled, use_ewc = STRATEGY_SEMANTICS[strategy]
    ewc = None
    if use_ewc:
        if ckpt.fisher is None or ckpt.snapshot is None:
            raise ExperimentError(
                f"strategy {strategy.value} needs Fisher importance in the checkpoint; "
                f"run pretraining with the snapshot step first"
            )
        ewc = EwcState(
            snapshot=ParamVector(values=ckpt.snapshot.copy(), layout=flat_layout),
            fisher=ckpt.fisher.copy(),
            lam=cfg.ewc_lambda,
        )
    pcfg = replace(cfg.pcrpo, b=cfg.pcrpo.b * cfg.adapt.cost_limit_scale)

    run_id = f"{strategy.value}-{domain}-s{seed}"
    rows: list[MetricsRow] = []
    snapshots: list[ParamVector] = []
    for k, tid in enumerate(sequence):
        for it in range(cfg.adapt.iterations):
            batch = collect_batch(
                agent.policy,
                agent.critic_param_tuple(),
                profile,
                targets,
                [tid],
                cfg.adapt.episodes_per_batch,
                mode="stochastic",
                reward_source=cfg.adapt.reward_source,
                env_cfg=cfg.env,
                gae_cfg=cfg.gae,
                seed=derive_seed(seed, _ADAPT, k, it),
            )
            (agent, diag), ok = _guarded_update(agent, batch, pcfg, ewc, safety_enabled)
            stats_d = batch_stats(batch)
            stage = diag.stage.label() if ok else "aborted"
            j_c = diag.j_c if ok else stats_d["avg_timestep_cost"]
            iteration = k * cfg.adapt.iterations + it
            rows.append(
                _row(run_id, seed, strategy.value, "adapt", iteration, tid, stats_d, j_c, stage)
            )
            if progress:
                print(
                    f"[adapt {strategy.value} s{seed} T{tid} {it:02d}] "
                    f"reward={stats_d['avg_timestep_reward']:.3f} "
                    f"cost={stats_d['avg_timestep_cost']:.3f} stage={stage}"
                )
        snapshots.append(agent.policy.flat().copy())
    return RunRecord(
        strategy=strategy,
        seed=seed,
        domain=domain,
        rows=rows,
        snapshots=snapshots,
        target_sequence=sequence,
        final_agent=agent,
    )


def evaluate(
    policy: GaussianPolicy,
    targets: list[np.ndarray],
    n_episodes_per_target: int,
    profile: DomainProfile,
    env_cfg: EnvConfig,
    seed: int,
) -> dict[int, TargetEval]:
    """Deterministic-action evaluation; per-target mean episode reward and cost.

    Episode RNG streams depend only on (seed, target, episode), so different
    policies are compared on identical domain draws.
    """
    results: dict[int, TargetEval] = {}
    for tid in range(len(targets)):
        ep_rewards, ep_costs = [], []
        for ep in range(n_episodes_per_target):
            rng = derive_rng(seed, _EVAL, tid, ep)
            instance = sample_randomization(profile, targets, tid, rng)
            traj = run_episode(
                policy, instance, env_cfg,
                stochastic=False, reward_source="true_state", rng=rng,
            )
            ep_rewards.append(float(traj.rewards.sum()))
            ep_costs.append(float(traj.costs.sum()))
        results[tid] = TargetEval(
            episode_reward=sum(ep_rewards) / len(ep_rewards),
            episode_cost=sum(ep_costs) / len(ep_costs),
        )
    return results


@dataclass(frozen=True)
class TransferEval:
    """Current/Others/Combined views over the per-target snapshot evaluations."""

    per_snapshot: list[dict[int, TargetEval]]
    target_sequence: tuple[int, ...]

    def current(self) -> float:
        vals = [
            snap[tid].total for snap, tid in zip(self.per_snapshot, self.target_sequence)
        ]
        return sum(vals) / len(vals)

    def others(self) -> float:
        vals = []
        for snap, tid in zip(self.per_snapshot, self.target_sequence):
            rest = [ev.total for other, ev in snap.items() if other != tid]
            vals.append(sum(rest) / len(rest))
        return sum(vals) / len(vals)

    def combined(self) -> float:
        vals = []
        for snap in self.per_snapshot:
            vals.append(sum(ev.total for ev in snap.values()) / len(snap))
        return sum(vals) / len(vals)

    def mean_cost(self) -> float:
        vals = []
        for snap in self.per_snapshot:
            vals.append(sum(ev.episode_cost for ev in snap.values()) / len(snap))
        return sum(vals) / len(vals)


def evaluate_record(
    record: RunRecord, cfg: ExperimentConfig, eval_seed: int
) -> TransferEval:
    """Evaluate every per-target snapshot of a run on all targets."""
    targets = cfg.targets()
    profile = cfg.profile(record.domain)
    spec = record.final_agent.policy.spec
    template = record.final_agent.policy
    per_snapshot = []
    for flat in record.snapshots:
        policy = template.with_flat(flat)
        per_snapshot.append(
            evaluate(policy, targets, cfg.eval_episodes_per_target, profile, cfg.env, eval_seed)
        )
    return TransferEval(per_snapshot=per_snapshot, target_sequence=record.target_sequence)


def fisher_analysis(
    ckpt_before: Checkpoint,
    params_after: ParamVector | np.ndarray,
    layer_filter: str | None = None,
) -> tuple[list[tuple[int, float, float]], float]:
    """Relative parameter change against Fisher importance.

    Returns one row (flat parameter index, fisher, relative change) per
    selected parameter plus the Spearman rank correlation over them. The
    default selection is the weight block connecting the last hidden layer to
    the output units.
    """
    if ckpt_before.fisher is None or ckpt_before.snapshot is None:
        raise ExperimentError("checkpoint has no Fisher importance")
    before = ckpt_before.snapshot
    after = params_after.values if isinstance(params_after, ParamVector) else np.asarray(params_after)
    if after.shape != before.shape:
        raise ExperimentError(
            f"parameter layouts differ: {after.shape} vs {before.shape}"
        )
    spec = ckpt_before.policy_spec
    layout = policy_layout(spec)
    if layer_filter is None:
        layer_filter = f"w{spec.n_layers - 1}"
    offset = 0
    selected: slice | None = None
    for entry in layout:
        if entry.name == layer_filter:
            selected = slice(offset, offset + entry.size)
            break
        offset += entry.size
    if selected is None:
        raise ExperimentError(f"no layer named {layer_filter!r} in policy layout")
    fisher = ckpt_before.fisher[selected]
    rel_change = np.abs(after[selected] - before[selected]) / (np.abs(before[selected]) + 1e-8)
    rows = [
        (selected.start + i, float(fisher[i]), float(rel_change[i]))
        for i in range(fisher.shape[0])
    ]
    rho = float(stats.spearmanr(fisher, rel_change).statistic)
    return rows, rho
