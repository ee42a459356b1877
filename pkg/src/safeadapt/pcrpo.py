"""Constrained policy optimization with staged updates and gradient projection.

Each batch update classifies the current cost estimate against a soft region
[b + h_minus, b + h_plus] around the cost limit b:

* above the region: ascend the cost-descent gradient only,
* below the region: ascend the reward gradient only,
* inside the region: combine both gradients, projecting each onto the other's
  orthogonal complement when they conflict (negative dot product).

The stage is decided once per batch from the cost estimate and the first-epoch
gradients, then held fixed for all epochs of that update.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .ewc import EwcState, ewc_penalty, ewc_penalty_grad
from .nets import (
    MlpSpec,
    MseObjective,
    GaussianPolicy,
    ParamVector,
    gaussian_logprob,
    mlp_backward,
    mlp_forward,
    mlp_forward_cached,
    policy_layout,
)
from .rollout import Batch


class PcrpoError(Exception):
    pass


@dataclass(frozen=True)
class PcrpoConfig:
    """Cost limit, slack region, step sizes, and surrogate settings."""

    b: float = 0.12
    h_minus: float = -0.03
    h_plus: float = 0.03
    eta: float = 0.02
    x_r: float = 0.5
    x_c: float = 0.5
    clip_eps: float = 0.2
    epochs: int = 5
    critic_lr: float = 0.01
    critic_epochs: int = 30
    critic_optimizer: str = "adam"

    def __post_init__(self) -> None:
        if self.b < 0:
            raise PcrpoError(f"cost limit b must be >= 0, got {self.b}")
        if not (self.h_minus <= 0.0 <= self.h_plus):
            raise PcrpoError(f"slack bounds must satisfy h_minus <= 0 <= h_plus, "
                             f"got ({self.h_minus}, {self.h_plus})")
        if self.x_r < 0 or self.x_c < 0 or abs(self.x_r + self.x_c - 1.0) > 1e-12:
            raise PcrpoError(f"gradient weights must be nonnegative and sum to 1, "
                             f"got ({self.x_r}, {self.x_c})")
        if self.clip_eps <= 0 or self.epochs < 1 or self.eta <= 0:
            raise PcrpoError("eta, clip_eps must be > 0 and epochs >= 1")
        if self.critic_optimizer not in ("adam", "sgd"):
            raise PcrpoError(f"unknown critic optimizer {self.critic_optimizer!r}")


class Stage(enum.Enum):
    SAFETY_VIOLATION = "safety_violation"
    SOFT_VIOLATION = "soft_violation"
    NO_VIOLATION = "no_violation"


@dataclass(frozen=True)
class StageDecision:
    stage: Stage
    conflict: bool = False

    def label(self) -> str:
        if self.stage is Stage.SOFT_VIOLATION:
            return "soft_conflict" if self.conflict else "soft_aligned"
        return self.stage.value


@dataclass(frozen=True)
class UpdateDiagnostics:
    stage: StageDecision
    j_c: float
    grad_norm_r: float
    grad_norm_c: float
    cos_angle: float
    ewc_penalty: float


def estimate_cost_value(batch: Batch) -> float:
    """Batch average timestep cost: total cost over total steps."""
    if batch.n_steps == 0:
        raise PcrpoError("empty batch")
    return float(batch.costs.sum()) / batch.n_steps


def select_stage(
    j_c: float, g_r: ParamVector, g_c: ParamVector, cfg: PcrpoConfig
) -> StageDecision:
    """Classify the cost estimate against [b + h_minus, b + h_plus].

    Values strictly above the region are a safety violation, strictly below a
    no-violation; inside (boundaries included) is a soft violation whose
    conflict flag is the sign of the gradient dot product.
    """
    if j_c > cfg.b + cfg.h_plus:
        return StageDecision(Stage.SAFETY_VIOLATION)
    if j_c < cfg.b + cfg.h_minus:
        return StageDecision(Stage.NO_VIOLATION)
    conflict = float(g_r.values @ g_c.values) < 0.0
    return StageDecision(Stage.SOFT_VIOLATION, conflict=conflict)


def project_gradients(
    g_r: ParamVector, g_c: ParamVector, cfg: PcrpoConfig, conflict: bool
) -> ParamVector:
    """Weighted combination of the two gradients, projected when they conflict.

    Under conflict each gradient is stripped of its component along the other;
    if either norm is zero the non-conflict convex combination is used instead.
    """
    gr, gc = g_r.values, g_c.values
    if conflict:
        nr = float(gr @ gr)
        nc = float(gc @ gc)
        if nr > 0.0 and nc > 0.0:
            dot = float(gr @ gc)
            proj_r = gr - (dot / nc) * gc
            proj_c = gc - (dot / nr) * gr
            return g_r.with_values(cfg.x_r * proj_r + cfg.x_c * proj_c)
    return g_r.with_values(cfg.x_r * gr + cfg.x_c * gc)


@dataclass(frozen=True)
class SurrogateObjective:
    """Clipped importance-ratio surrogate over a fixed batch, as a mean.

    ``value`` is E[min(ratio * A, clip(ratio) * A)] over the batch steps;
    ``gradient`` is its analytic ascent gradient in the combined policy layout.
    """

    spec: MlpSpec
    observations: np.ndarray
    actions: np.ndarray
    old_logprobs: np.ndarray
    advantages: np.ndarray
    clip_eps: float

    def _ratios(self, params: ParamVector) -> tuple[np.ndarray, np.ndarray, list[np.ndarray], np.ndarray]:
        n_net = self.spec.param_count()
        net = ParamVector(values=params.values[:n_net], layout=self.spec.layout())
        log_std = params.values[n_net:]
        mu, acts = mlp_forward_cached(net, self.spec, self.observations)
        logp = np.asarray(gaussian_logprob(mu, log_std, self.actions))
        with np.errstate(over="ignore"):
            ratios = np.exp(logp - self.old_logprobs)
        if not np.all(np.isfinite(ratios)):
            raise PcrpoError("non-finite importance ratio in surrogate")
        return ratios, mu, acts, log_std

    def value(self, params: ParamVector) -> float:
        ratios, _, _, _ = self._ratios(params)
        clipped = np.clip(ratios, 1.0 - self.clip_eps, 1.0 + self.clip_eps)
        return float(np.mean(np.minimum(ratios * self.advantages, clipped * self.advantages)))

    def gradient(self, params: ParamVector) -> ParamVector:
        ratios, mu, acts, log_std = self._ratios(params)
        adv = self.advantages
        # The unclipped branch is active unless the ratio has left the trust
        # region on the side the advantage pushes toward.
        active = np.where(
            adv >= 0.0, ratios <= 1.0 + self.clip_eps, ratios >= 1.0 - self.clip_eps
        )
        n = ratios.shape[0]
        weights = adv * ratios * active / n
        a = np.atleast_2d(self.actions)
        inv_var = np.exp(-2.0 * log_std)
        dmu = weights[:, None] * (a - mu) * inv_var
        z2 = ((a - mu) ** 2) * inv_var
        dlog_std = (weights[:, None] * (z2 - 1.0)).sum(axis=0)
        n_net = self.spec.param_count()
        net = ParamVector(values=params.values[:n_net], layout=self.spec.layout())
        net_grad = mlp_backward(net, self.spec, acts, dmu)
        return ParamVector(
            values=np.concatenate([net_grad, dlog_std]), layout=policy_layout(self.spec)
        )


def surrogate_grad(
    policy: GaussianPolicy,
    old_logprobs: np.ndarray,
    batch: Batch,
    advantages: np.ndarray,
    clip_eps: float,
) -> ParamVector:
    """Ascent gradient of the clipped surrogate at the policy's current parameters."""
    obj = SurrogateObjective(
        spec=policy.spec,
        observations=batch.observations,
        actions=batch.actions,
        old_logprobs=np.asarray(old_logprobs, dtype=np.float64),
        advantages=np.asarray(advantages, dtype=np.float64),
        clip_eps=clip_eps,
    )
    grad = obj.gradient(policy.flat())
    if not np.all(np.isfinite(grad.values)):
        raise PcrpoError("non-finite surrogate gradient")
    return grad


@dataclass(frozen=True)
class Critic:
    spec: MlpSpec
    params: ParamVector

    def predict(self, obs: np.ndarray) -> np.ndarray:
        out = mlp_forward(self.params, self.spec, obs)
        return out[..., 0]


@dataclass(frozen=True)
class AgentState:
    policy: GaussianPolicy
    critic_r: Critic
    critic_c: Critic

    def critic_param_tuple(self):
        return (
            (self.critic_r.params, self.critic_r.spec),
            (self.critic_c.params, self.critic_c.spec),
        )


def fit_critic(
    critic: Critic,
    observations: np.ndarray,
    targets: np.ndarray,
    lr: float,
    epochs: int,
    optimizer: str = "adam",
    minibatch: int | None = 2048,
) -> Critic:
    """MSE regression of the critic onto the given return targets.

    ``epochs`` counts optimizer steps; each step regresses on one contiguous
    block of at most ``minibatch`` samples, rotating through the data in a
    fixed deterministic schedule (None fits the full batch every step).
    """
    observations = np.atleast_2d(np.asarray(observations, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.float64)[:, None]
    n = observations.shape[0]
    if minibatch is None or minibatch >= n:
        blocks = [(0, n)]
    else:
        starts = list(range(0, n, minibatch))
        blocks = [(s, min(s + minibatch, n)) for s in starts]

    def grad_at(values: np.ndarray, step: int) -> np.ndarray:
        lo, hi = blocks[step % len(blocks)]
        obj = MseObjective(
            spec=critic.spec, inputs=observations[lo:hi], targets=targets[lo:hi]
        )
        return obj.gradient(critic.params.with_values(values)).values

    values = critic.params.values.copy()
    if optimizer == "adam":
        m = np.zeros_like(values)
        v = np.zeros_like(values)
        for t in range(1, epochs + 1):
            g = grad_at(values, t - 1)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            m_hat = m / (1.0 - 0.9**t)
            v_hat = v / (1.0 - 0.999**t)
            values = values - lr * m_hat / (np.sqrt(v_hat) + 1e-8)
    elif optimizer == "sgd":
        for t in range(epochs):
            values = values - lr * grad_at(values, t)
    else:
        raise PcrpoError(f"unknown critic optimizer {optimizer!r}")
    if not np.all(np.isfinite(values)):
        raise PcrpoError("non-finite critic parameters after fit")
    return Critic(spec=critic.spec, params=critic.params.with_values(values))


def fit_critics(agent: AgentState, batch: Batch, cfg: PcrpoConfig) -> AgentState:
    """Fit both critics to their return channels. Critics are never EWC-regularized."""
    critic_r = fit_critic(
        agent.critic_r, batch.observations, batch.returns_r,
        cfg.critic_lr, cfg.critic_epochs, cfg.critic_optimizer,
    )
    critic_c = fit_critic(
        agent.critic_c, batch.observations, batch.returns_c,
        cfg.critic_lr, cfg.critic_epochs, cfg.critic_optimizer,
    )
    return AgentState(policy=agent.policy, critic_r=critic_r, critic_c=critic_c)


def _cos_angle(g_r: np.ndarray, g_c: np.ndarray) -> float:
    nr = float(np.linalg.norm(g_r))
    nc = float(np.linalg.norm(g_c))
    if nr == 0.0 or nc == 0.0:
        return 0.0
    return float(np.clip(float(g_r @ g_c) / (nr * nc), -1.0, 1.0))


def pcrpo_update(
    agent: AgentState,
    batch: Batch,
    cfg: PcrpoConfig,
    ewc: EwcState | None = None,
    safety_enabled: bool = True,
) -> tuple[AgentState, UpdateDiagnostics]:
    """One batch update: stage selection, `epochs` policy steps, critic fits.

    With ``safety_enabled`` False the update always takes the reward-only path
    regardless of the cost level. When an EwcState with nonzero lambda is
    given, the quadratic penalty gradient is subtracted from the ascent
    direction each epoch.
    """
    j_c = estimate_cost_value(batch)
    policy = agent.policy
    g_r = surrogate_grad(policy, batch.logprobs, batch, batch.advantages_r, cfg.clip_eps)
    g_c = surrogate_grad(policy, batch.logprobs, batch, -batch.advantages_c, cfg.clip_eps)
    if safety_enabled:
        decision = select_stage(j_c, g_r, g_c, cfg)
    else:
        decision = StageDecision(Stage.NO_VIOLATION)
    diag = UpdateDiagnostics(
        stage=decision,
        j_c=j_c,
        grad_norm_r=float(np.linalg.norm(g_r.values)),
        grad_norm_c=float(np.linalg.norm(g_c.values)),
        cos_angle=_cos_angle(g_r.values, g_c.values),
        ewc_penalty=(ewc_penalty(policy.flat(), ewc) if ewc is not None else 0.0),
    )
    use_ewc = ewc is not None and ewc.lam != 0.0
    for epoch in range(cfg.epochs):
        if epoch > 0:
            if decision.stage is not Stage.SAFETY_VIOLATION:
                g_r = surrogate_grad(
                    policy, batch.logprobs, batch, batch.advantages_r, cfg.clip_eps
                )
            if decision.stage is not Stage.NO_VIOLATION:
                g_c = surrogate_grad(
                    policy, batch.logprobs, batch, -batch.advantages_c, cfg.clip_eps
                )
        if decision.stage is Stage.SAFETY_VIOLATION:
            direction = g_c.values
        elif decision.stage is Stage.NO_VIOLATION:
            direction = g_r.values
        else:
            direction = project_gradients(g_r, g_c, cfg, decision.conflict).values
        flat = policy.flat()
        if use_ewc:
            direction = direction - ewc_penalty_grad(flat, ewc).values
        new_values = flat.values + cfg.eta * direction
        if not np.all(np.isfinite(new_values)):
            raise PcrpoError("non-finite policy parameters after update step")
        policy = policy.with_flat(flat.with_values(new_values))
    updated = fit_critics(
        AgentState(policy=policy, critic_r=agent.critic_r, critic_c=agent.critic_c),
        batch,
        cfg,
    )
    return updated, diag
