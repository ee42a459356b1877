"""Versioned checkpoint container for policy, critics, Fisher, and snapshot.

Stored as an .npz archive with a JSON header; parameter arrays round-trip
bit-exactly. Loading validates the format version and every array length
against the declared network shapes.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .nets import GaussianPolicy, MlpSpec, ParamVector
from .pcrpo import AgentState, Critic

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class Checkpoint:
    policy_spec: MlpSpec
    critic_spec: MlpSpec
    policy_params: np.ndarray  # mean-net flat values
    log_std: np.ndarray
    critic_r_params: np.ndarray
    critic_c_params: np.ndarray
    fisher: np.ndarray | None
    snapshot: np.ndarray | None  # combined policy layout (mean net + log_std)
    config_hash: str
    seed: int
    phase: str

    def policy(self) -> GaussianPolicy:
        return GaussianPolicy(
            spec=self.policy_spec,
            params=ParamVector(values=self.policy_params.copy(),
                               layout=self.policy_spec.layout()),
            log_std=self.log_std.copy(),
        )

    def agent(self) -> AgentState:
        return AgentState(
            policy=self.policy(),
            critic_r=Critic(
                spec=self.critic_spec,
                params=ParamVector(values=self.critic_r_params.copy(),
                                   layout=self.critic_spec.layout()),
            ),
            critic_c=Critic(
                spec=self.critic_spec,
                params=ParamVector(values=self.critic_c_params.copy(),
                                   layout=self.critic_spec.layout()),
            ),
        )

    def with_agent(self, agent: AgentState, phase: str) -> "Checkpoint":
        return replace(
            self,
            policy_params=agent.policy.params.values.copy(),
            log_std=agent.policy.log_std.copy(),
            critic_r_params=agent.critic_r.params.values.copy(),
            critic_c_params=agent.critic_c.params.values.copy(),
            phase=phase,
        )

    def with_policy_flat(self, flat_values: np.ndarray, phase: str) -> "Checkpoint":
        """Replace only the policy (combined mean net + log_std layout)."""
        n_net = self.policy_spec.param_count()
        return replace(
            self,
            policy_params=np.asarray(flat_values[:n_net], dtype=np.float64).copy(),
            log_std=np.asarray(flat_values[n_net:], dtype=np.float64).copy(),
            phase=phase,
        )


def from_agent(
    agent: AgentState,
    fisher: np.ndarray | None,
    snapshot: np.ndarray | None,
    config_hash: str,
    seed: int,
    phase: str,
) -> Checkpoint:
    return Checkpoint(
        policy_spec=agent.policy.spec,
        critic_spec=agent.critic_r.spec,
        policy_params=agent.policy.params.values.copy(),
        log_std=agent.policy.log_std.copy(),
        critic_r_params=agent.critic_r.params.values.copy(),
        critic_c_params=agent.critic_c.params.values.copy(),
        fisher=None if fisher is None else np.asarray(fisher, dtype=np.float64).copy(),
        snapshot=None if snapshot is None else np.asarray(snapshot, dtype=np.float64).copy(),
        config_hash=config_hash,
        seed=seed,
        phase=phase,
    )


def _spec_to_dict(spec: MlpSpec) -> dict:
    return {
        "input_dim": spec.input_dim,
        "hidden_dims": list(spec.hidden_dims),
        "output_dim": spec.output_dim,
        "activation": spec.activation,
    }


def _spec_from_dict(d: dict) -> MlpSpec:
    return MlpSpec(
        input_dim=d["input_dim"],
        hidden_dims=tuple(d["hidden_dims"]),
        output_dim=d["output_dim"],
        activation=d.get("activation", "tanh"),
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "policy_spec": _spec_to_dict(ckpt.policy_spec),
        "critic_spec": _spec_to_dict(ckpt.critic_spec),
        "config_hash": ckpt.config_hash,
        "seed": ckpt.seed,
        "phase": ckpt.phase,
        "has_fisher": ckpt.fisher is not None,
        "has_snapshot": ckpt.snapshot is not None,
    }
    arrays = {
        "meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
        "policy_params": ckpt.policy_params,
        "log_std": ckpt.log_std,
        "critic_r_params": ckpt.critic_r_params,
        "critic_c_params": ckpt.critic_c_params,
    }
    if ckpt.fisher is not None:
        arrays["fisher"] = ckpt.fisher
    if ckpt.snapshot is not None:
        arrays["snapshot"] = ckpt.snapshot
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path) as data:
            try:
                meta = json.loads(bytes(data["meta"]).decode())
            except (KeyError, json.JSONDecodeError) as exc:
                raise CheckpointError(f"corrupted checkpoint {path}: bad header") from exc
            version = meta.get("format_version")
            if version != FORMAT_VERSION:
                raise CheckpointError(
                    f"unsupported checkpoint format version {version!r} "
                    f"(supported: {FORMAT_VERSION})"
                )
            policy_spec = _spec_from_dict(meta["policy_spec"])
            critic_spec = _spec_from_dict(meta["critic_spec"])
            arrays = {}
            for key in ("policy_params", "log_std", "critic_r_params", "critic_c_params"):
                if key not in data:
                    raise CheckpointError(f"corrupted checkpoint {path}: missing {key}")
                arrays[key] = np.asarray(data[key], dtype=np.float64)
            fisher = np.asarray(data["fisher"], dtype=np.float64) if meta["has_fisher"] else None
            snapshot = (
                np.asarray(data["snapshot"], dtype=np.float64) if meta["has_snapshot"] else None
            )
    except (zipfile.BadZipFile, OSError, ValueError, EOFError) as exc:
        raise CheckpointError(f"corrupted checkpoint {path}: {exc}") from exc

    n_policy = policy_spec.param_count()
    n_flat = n_policy + policy_spec.output_dim
    checks = [
        ("policy_params", arrays["policy_params"].shape, (n_policy,)),
        ("log_std", arrays["log_std"].shape, (policy_spec.output_dim,)),
        ("critic_r_params", arrays["critic_r_params"].shape, (critic_spec.param_count(),)),
        ("critic_c_params", arrays["critic_c_params"].shape, (critic_spec.param_count(),)),
    ]
    if fisher is not None:
        checks.append(("fisher", fisher.shape, (n_flat,)))
    if snapshot is not None:
        checks.append(("snapshot", snapshot.shape, (n_flat,)))
    for name, got, want in checks:
        if got != want:
            raise CheckpointError(
                f"corrupted checkpoint {path}: {name} has shape {got}, expected {want}"
            )
    return Checkpoint(
        policy_spec=policy_spec,
        critic_spec=critic_spec,
        policy_params=arrays["policy_params"],
        log_std=arrays["log_std"],
        critic_r_params=arrays["critic_r_params"],
        critic_c_params=arrays["critic_c_params"],
        fisher=fisher,
        snapshot=snapshot,
        config_hash=meta["config_hash"],
        seed=meta["seed"],
        phase=meta["phase"],
    )
