"""Experiment configuration: YAML loading, validation, defaults, and hashing.

Every field has a default; an empty config file yields the canonical
experiment setup. Unknown keys are rejected so typos cannot silently fall back
to defaults.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .arm_env import DomainProfile, EnvConfig, targets_from_angles
from .pcrpo import PcrpoConfig
from .rollout import GaeConfig


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class PhaseSettings:
    """Iteration/batch budget and data source for one training phase."""

    iterations: int
    episodes_per_batch: int
    profile: str
    reward_source: str

    def __post_init__(self) -> None:
        if self.iterations < 1 or self.episodes_per_batch < 1:
            raise ConfigError("phase iteration and episode counts must be >= 1")
        if self.reward_source not in ("true_state", "observation"):
            raise ConfigError(f"unknown reward_source {self.reward_source!r}")


@dataclass(frozen=True)
class AdaptSettings(PhaseSettings):
    cost_limit_scale: float = 0.1
    target_sequence: tuple[int, ...] = (0, 1, 2, 3)

    def __post_init__(self) -> None:
        super().__post_init__()
        if not 0.0 < self.cost_limit_scale <= 1.0:
            raise ConfigError("cost_limit_scale must be in (0, 1]")
        if len(self.target_sequence) == 0:
            raise ConfigError("target_sequence must be non-empty")


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvConfig
    gae: GaeConfig
    pcrpo: PcrpoConfig
    profiles: dict[str, DomainProfile]
    target_angles_deg: tuple[tuple[float, float], ...]
    hidden_dims: tuple[int, ...]
    std_init: float
    ewc_lambda: float
    fisher_buffer_steps: int
    pretrain: PhaseSettings
    adapt: AdaptSettings
    eval_episodes_per_target: int
    seeds: tuple[int, ...]
    output_dir: str

    def targets(self):
        return targets_from_angles(list(self.target_angles_deg), self.env)

    def profile(self, name: str) -> DomainProfile:
        if name not in self.profiles:
            raise ConfigError(
                f"unknown domain profile {name!r}; available: {sorted(self.profiles)}"
            )
        return self.profiles[name]

    def to_dict(self) -> dict:
        return {
            "env": {
                "dt": self.env.dt,
                "episode_len": self.env.episode_len,
                "v_max_deg": math.degrees(self.env.v_max),
                "limit1_deg": math.degrees(self.env.limit1),
                "limit2_deg": math.degrees(self.env.limit2),
                "l1": self.env.l1,
                "l2": self.env.l2,
                "substeps": self.env.substeps,
            },
            "net": {"hidden_dims": list(self.hidden_dims), "std_init": self.std_init},
            "gae": {
                "gamma": self.gae.gamma,
                "lambda_gae": self.gae.lambda_gae,
                "normalize_advantages": self.gae.normalize_advantages,
            },
            "pcrpo": {
                "b": self.pcrpo.b,
                "h_minus": self.pcrpo.h_minus,
                "h_plus": self.pcrpo.h_plus,
                "eta": self.pcrpo.eta,
                "x_r": self.pcrpo.x_r,
                "x_c": self.pcrpo.x_c,
                "clip_eps": self.pcrpo.clip_eps,
                "epochs": self.pcrpo.epochs,
                "critic_lr": self.pcrpo.critic_lr,
                "critic_epochs": self.pcrpo.critic_epochs,
                "critic_optimizer": self.pcrpo.critic_optimizer,
            },
            "ewc": {"lam": self.ewc_lambda, "fisher_buffer_steps": self.fisher_buffer_steps},
            "profiles": {
                name: {
                    "noise_pct": list(p.noise_pct_range),
                    "stiffness": list(p.stiffness_range),
                    "damping": list(p.damping_range),
                }
                for name, p in sorted(self.profiles.items())
            },
            "targets": [{"yaw_deg": y, "q2_deg": q} for y, q in self.target_angles_deg],
            "pretrain": {
                "iterations": self.pretrain.iterations,
                "episodes_per_batch": self.pretrain.episodes_per_batch,
                "profile": self.pretrain.profile,
                "reward_source": self.pretrain.reward_source,
            },
            "adapt": {
                "iterations_per_target": self.adapt.iterations,
                "episodes_per_batch": self.adapt.episodes_per_batch,
                "profile": self.adapt.profile,
                "reward_source": self.adapt.reward_source,
                "cost_limit_scale": self.adapt.cost_limit_scale,
                "target_sequence": list(self.adapt.target_sequence),
            },
            "eval": {"episodes_per_target": self.eval_episodes_per_target},
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
        }

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _section(data: dict, key: str) -> dict:
    value = data.get(key, {})
    if value is None:
        value = {}
    if not isinstance(value, dict):
        raise ConfigError(f"section {key!r} must be a mapping")
    return value


def _check_keys(section: dict, allowed: set[str], path: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {path}: {sorted(unknown)}")


def _get(section: dict, key: str, default, path: str, kind=float):
    value = section.get(key, default)
    if kind is float:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{path}.{key} must be a number, got {value!r}")
        return float(value)
    if kind is int:
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{path}.{key} must be an integer, got {value!r}")
        return value
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}.{key} must be a boolean, got {value!r}")
        return value
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}.{key} must be a string, got {value!r}")
        return value
    raise AssertionError(kind)


def _pair(section: dict, key: str, default: tuple[float, float], path: str) -> tuple[float, float]:
    value = section.get(key, list(default))
    if (
        not isinstance(value, (list, tuple))
        or len(value) != 2
        or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
    ):
        raise ConfigError(f"{path}.{key} must be a [lo, hi] pair of numbers")
    return float(value[0]), float(value[1])


DEFAULT_PROFILES = {
    "randomized": {"noise_pct": (0.0, 0.2), "stiffness": (10.0, 1000.0), "damping": (10.0, 1000.0)},
    "realistic": {"noise_pct": (0.0, 0.02), "stiffness": (10.0, 10.0), "damping": (20.0, 20.0)},
}

DEFAULT_TARGETS = ((-60.0, 65.0), (-20.0, 75.0), (20.0, 60.0), (60.0, 70.0))

TOP_LEVEL_KEYS = {
    "env", "net", "gae", "pcrpo", "ewc", "profiles", "targets",
    "pretrain", "adapt", "eval", "seeds", "output_dir",
}


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    _check_keys(data, TOP_LEVEL_KEYS, "config")

    env_s = _section(data, "env")
    _check_keys(env_s, {"dt", "episode_len", "v_max_deg", "limit1_deg", "limit2_deg",
                        "l1", "l2", "substeps"}, "env")
    try:
        env = EnvConfig(
            dt=_get(env_s, "dt", 0.1, "env"),
            episode_len=_get(env_s, "episode_len", 100, "env", int),
            v_max=math.radians(_get(env_s, "v_max_deg", 20.0, "env")),
            limit1=math.radians(_get(env_s, "limit1_deg", 150.0, "env")),
            limit2=math.radians(_get(env_s, "limit2_deg", 80.0, "env")),
            l1=_get(env_s, "l1", 0.36, "env"),
            l2=_get(env_s, "l2", 0.42, "env"),
            substeps=_get(env_s, "substeps", 10, "env", int),
        )
    except Exception as exc:
        raise ConfigError(f"env: {exc}") from exc

    net_s = _section(data, "net")
    _check_keys(net_s, {"hidden_dims", "std_init"}, "net")
    hidden = net_s.get("hidden_dims", [64, 64])
    if not isinstance(hidden, (list, tuple)) or not all(
        isinstance(h, int) and h > 0 for h in hidden
    ):
        raise ConfigError("net.hidden_dims must be a list of positive integers")
    std_init = _get(net_s, "std_init", 0.5, "net")
    if std_init <= 0:
        raise ConfigError(f"net.std_init must be > 0, got {std_init}")

    gae_s = _section(data, "gae")
    _check_keys(gae_s, {"gamma", "lambda_gae", "normalize_advantages"}, "gae")
    try:
        gae = GaeConfig(
            gamma=_get(gae_s, "gamma", 0.99, "gae"),
            lambda_gae=_get(gae_s, "lambda_gae", 0.95, "gae"),
            normalize_advantages=_get(gae_s, "normalize_advantages", True, "gae", bool),
        )
    except Exception as exc:
        raise ConfigError(f"gae: {exc}") from exc

    pcrpo_s = _section(data, "pcrpo")
    _check_keys(pcrpo_s, {"b", "h_minus", "h_plus", "eta", "x_r", "x_c", "clip_eps",
                          "epochs", "critic_lr", "critic_epochs", "critic_optimizer"},
                "pcrpo")
    try:
        pcrpo = PcrpoConfig(
            b=_get(pcrpo_s, "b", 0.12, "pcrpo"),
            h_minus=_get(pcrpo_s, "h_minus", -0.03, "pcrpo"),
            h_plus=_get(pcrpo_s, "h_plus", 0.03, "pcrpo"),
            eta=_get(pcrpo_s, "eta", 0.02, "pcrpo"),
            x_r=_get(pcrpo_s, "x_r", 0.5, "pcrpo"),
            x_c=_get(pcrpo_s, "x_c", 0.5, "pcrpo"),
            clip_eps=_get(pcrpo_s, "clip_eps", 0.2, "pcrpo"),
            epochs=_get(pcrpo_s, "epochs", 5, "pcrpo", int),
            critic_lr=_get(pcrpo_s, "critic_lr", 0.01, "pcrpo"),
            critic_epochs=_get(pcrpo_s, "critic_epochs", 30, "pcrpo", int),
            critic_optimizer=_get(pcrpo_s, "critic_optimizer", "adam", "pcrpo", str),
        )
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"pcrpo: {exc}") from exc

    ewc_s = _section(data, "ewc")
    _check_keys(ewc_s, {"lam", "fisher_buffer_steps"}, "ewc")
    ewc_lambda = _get(ewc_s, "lam", 1.0, "ewc")
    if ewc_lambda < 0:
        raise ConfigError(f"ewc.lam must be >= 0, got {ewc_lambda}")
    fisher_steps = _get(ewc_s, "fisher_buffer_steps", 5000, "ewc", int)
    if fisher_steps < 1:
        raise ConfigError("ewc.fisher_buffer_steps must be >= 1")

    profiles_s = _section(data, "profiles")
    profiles: dict[str, DomainProfile] = {}
    merged = {name: dict(DEFAULT_PROFILES.get(name, {})) for name in DEFAULT_PROFILES}
    for name, spec in profiles_s.items():
        if not isinstance(spec, dict):
            raise ConfigError(f"profiles.{name} must be a mapping")
        merged.setdefault(name, {})
        _check_keys(spec, {"noise_pct", "stiffness", "damping"}, f"profiles.{name}")
        merged[name].update(spec)
    for name, spec in merged.items():
        try:
            profiles[name] = DomainProfile(
                name=name,
                noise_pct_range=_pair(spec, "noise_pct", (0.0, 0.0), f"profiles.{name}"),
                stiffness_range=_pair(spec, "stiffness", (10.0, 10.0), f"profiles.{name}"),
                damping_range=_pair(spec, "damping", (20.0, 20.0), f"profiles.{name}"),
            )
        except ConfigError:
            raise
        except Exception as exc:
            raise ConfigError(f"profiles.{name}: {exc}") from exc

    targets_raw = data.get("targets", None)
    if targets_raw is None:
        target_angles = DEFAULT_TARGETS
    else:
        if not isinstance(targets_raw, list) or not targets_raw:
            raise ConfigError("targets must be a non-empty list")
        angles = []
        for i, entry in enumerate(targets_raw):
            if not isinstance(entry, dict):
                raise ConfigError(f"targets[{i}] must be a mapping")
            _check_keys(entry, {"yaw_deg", "q2_deg"}, f"targets[{i}]")
            angles.append(
                (_get(entry, "yaw_deg", None, f"targets[{i}]"),
                 _get(entry, "q2_deg", None, f"targets[{i}]"))
            )
        target_angles = tuple(angles)

    pre_s = _section(data, "pretrain")
    _check_keys(pre_s, {"iterations", "episodes_per_batch", "profile", "reward_source"},
                "pretrain")
    pretrain = PhaseSettings(
        iterations=_get(pre_s, "iterations", 200, "pretrain", int),
        episodes_per_batch=_get(pre_s, "episodes_per_batch", 64, "pretrain", int),
        profile=_get(pre_s, "profile", "randomized", "pretrain", str),
        reward_source=_get(pre_s, "reward_source", "true_state", "pretrain", str),
    )

    adapt_s = _section(data, "adapt")
    _check_keys(adapt_s, {"iterations_per_target", "episodes_per_batch", "profile",
                          "reward_source", "cost_limit_scale", "target_sequence"},
                "adapt")
    seq = adapt_s.get("target_sequence", list(range(len(target_angles))))
    if not isinstance(seq, list) or not all(isinstance(s, int) for s in seq):
        raise ConfigError("adapt.target_sequence must be a list of integers")
    adapt = AdaptSettings(
        iterations=_get(adapt_s, "iterations_per_target", 10, "adapt", int),
        episodes_per_batch=_get(adapt_s, "episodes_per_batch", 10, "adapt", int),
        profile=_get(adapt_s, "profile", "realistic", "adapt", str),
        reward_source=_get(adapt_s, "reward_source", "observation", "adapt", str),
        cost_limit_scale=_get(adapt_s, "cost_limit_scale", 0.1, "adapt"),
        target_sequence=tuple(seq),
    )
    for tid in adapt.target_sequence:
        if not 0 <= tid < len(target_angles):
            raise ConfigError(f"adapt.target_sequence id {tid} outside 0..{len(target_angles) - 1}")

    eval_s = _section(data, "eval")
    _check_keys(eval_s, {"episodes_per_target"}, "eval")
    eval_eps = _get(eval_s, "episodes_per_target", 10, "eval", int)
    if eval_eps < 1:
        raise ConfigError("eval.episodes_per_target must be >= 1")

    seeds_raw = data.get("seeds", [0, 1, 2, 3, 4])
    if (
        not isinstance(seeds_raw, list)
        or not seeds_raw
        or not all(isinstance(s, int) and s >= 0 for s in seeds_raw)
    ):
        raise ConfigError("seeds must be a non-empty list of nonnegative integers")

    output_dir = _get(data, "output_dir", "runs", "config", str)

    for name in (pretrain.profile, adapt.profile):
        if name not in profiles:
            raise ConfigError(f"phase references unknown profile {name!r}")

    return ExperimentConfig(
        env=env,
        gae=gae,
        pcrpo=pcrpo,
        profiles=profiles,
        target_angles_deg=target_angles,
        hidden_dims=tuple(hidden),
        std_init=std_init,
        ewc_lambda=ewc_lambda,
        fisher_buffer_steps=fisher_steps,
        pretrain=pretrain,
        adapt=adapt,
        eval_episodes_per_target=eval_eps,
        seeds=tuple(seeds_raw),
        output_dir=output_dir,
    )


def default_config() -> ExperimentConfig:
    return config_from_dict({})


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"cannot parse {path}{where}: {exc}") from exc
    if data is None:
        data = {}
    return config_from_dict(data)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
