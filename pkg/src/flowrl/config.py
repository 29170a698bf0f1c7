"""Run configuration: one INI file, validated field by field.

Grammar: ``[section]`` headers followed by ``key = value`` lines; ``#`` or
``;`` start comments.  Sections are ``task``, ``policy``, ``sft``, ``rl``
and ``critic``; unknown sections or keys are rejected.  Tuples are
comma-separated, ``none`` is the null value.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .algo import FlowRLTrainer, METHODS
from .envs import TaskSpec
from .policy import FlowPolicy


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # [task]
    task_family: str = "pick_place"
    n_objects: int = 4
    n_receptacles: int = 4
    task_id: int | None = 0
    horizon: int = 40
    success_radius: float = 0.05
    # [policy]
    chunk_size: int = 5
    denoise_steps: int = 4
    noise_level: float = 0.5
    sigma_min: float = 0.08
    sigma_max: float = 0.16
    time_feature_dim: int = 8
    hidden_sizes: tuple = (128, 128)
    activation: str = "silu"
    # [sft]
    demo_count: int = 10
    demo_jitter: float = 0.01
    sft_epochs: int = 3000
    sft_batch_size: int = 64
    sft_learning_rate: float = 1e-3
    # [rl]
    method: str = "flow_sde_hybrid"
    algorithm: str = "ppo"
    noise: str | None = None
    mdp: str | None = None
    n_envs: int = 64
    macro_steps_per_rollout: int = 64
    train_epochs: int = 200
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    update_epochs: int = 4
    minibatch_size: int = 1024
    entropy_coef: float = 0.005
    value_coef: float = 0.5
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    lr_schedule: str = "constant"
    kl_stop_threshold: float | None = None
    gamma_per_primitive: bool = False
    max_grad_norm: float | None = 1.0
    group_size: int = 8
    eval_every: int = 25
    eval_episodes: int = 128
    seed: int = 0
    # [critic]
    placement: str = "obs_head"
    depth: str = "mlp4"
    width: int = 64

    def task_spec(self) -> TaskSpec:
        return TaskSpec(self.task_family, self.n_objects, self.n_receptacles, self.task_id,
                        self.horizon, self.success_radius)

    def make_policy(self) -> FlowPolicy:
        return FlowPolicy(
            action_dim=3, chunk_size=self.chunk_size, denoise_steps=self.denoise_steps,
            noise_level=self.noise_level, sigma_min=self.sigma_min, sigma_max=self.sigma_max,
            time_feature_dim=self.time_feature_dim, hidden_sizes=tuple(self.hidden_sizes),
            activation=self.activation, n_epochs=self.sft_epochs, batch_size=self.sft_batch_size,
            learning_rate=self.sft_learning_rate, random_state=self.seed,
        )

    def make_trainer(self) -> FlowRLTrainer:
        return FlowRLTrainer(
            method=self.method, algorithm=self.algorithm, noise=self.noise, mdp=self.mdp,
            n_envs=self.n_envs, macro_steps=self.macro_steps_per_rollout, train_epochs=self.train_epochs,
            gamma=self.gamma, gae_lambda=self.gae_lambda, clip_ratio=self.clip_ratio,
            update_epochs=self.update_epochs, minibatch_size=self.minibatch_size,
            entropy_coef=self.entropy_coef, value_coef=self.value_coef, actor_lr=self.actor_lr,
            critic_lr=self.critic_lr, lr_schedule=self.lr_schedule, kl_stop_threshold=self.kl_stop_threshold,
            gamma_per_primitive=self.gamma_per_primitive, max_grad_norm=self.max_grad_norm,
            critic_placement=self.placement, critic_depth=self.depth, critic_width=self.width,
            group_size=self.group_size, eval_every=self.eval_every, eval_episodes=self.eval_episodes,
            random_state=self.seed,
        )

    def validate(self) -> "RunConfig":
        """Check every field against the invariants of the type that owns it."""
        try:
            spec = self.task_spec()
            spec.validate(self.chunk_size)
            self.make_policy().config_for(spec.d_obs).validate()
            if self.method not in METHODS:
                raise ValueError(f"invalid method={self.method!r}; expected one of {tuple(METHODS)}")
            trainer = self.make_trainer()
            trainer.ppo_config.validate()
            trainer.critic_config.validate()
            trainer.resolved()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        checks = {
            "activation": self.activation in ("silu", "tanh"),
            "hidden_sizes": len(self.hidden_sizes) >= 1 and all(h >= 1 for h in self.hidden_sizes),
            "demo_count": self.demo_count >= 1,
            "demo_jitter": self.demo_jitter >= 0.0,
            "sft_epochs": self.sft_epochs >= 0,
            "sft_batch_size": self.sft_batch_size >= 1,
            "sft_learning_rate": self.sft_learning_rate > 0.0,
            "algorithm": self.algorithm in ("ppo", "grpo"),
            "n_envs": self.n_envs >= 1,
            "macro_steps_per_rollout": self.macro_steps_per_rollout >= 1,
            "train_epochs": self.train_epochs >= 0,
            "actor_lr": self.actor_lr > 0.0,
            "critic_lr": self.critic_lr > 0.0,
            "max_grad_norm": self.max_grad_norm is None or self.max_grad_norm > 0.0,
            "group_size": self.algorithm != "grpo" or (self.group_size >= 2 and self.n_envs % self.group_size == 0),
            "eval_every": self.eval_every >= 0,
            "eval_episodes": self.eval_episodes >= 1,
        }
        for name, ok in checks.items():
            if not ok:
                raise ConfigError(f"invalid {name}={getattr(self, name)!r}")
        return self


SECTIONS = {
    "task": ("task_family", "n_objects", "n_receptacles", "task_id", "horizon", "success_radius"),
    "policy": ("chunk_size", "denoise_steps", "noise_level", "sigma_min", "sigma_max", "time_feature_dim",
               "hidden_sizes", "activation"),
    "sft": ("demo_count", "demo_jitter", "sft_epochs", "sft_batch_size", "sft_learning_rate"),
    "rl": ("method", "algorithm", "noise", "mdp", "n_envs", "macro_steps_per_rollout", "train_epochs", "gamma",
           "gae_lambda", "clip_ratio", "update_epochs", "minibatch_size", "entropy_coef", "value_coef",
           "actor_lr", "critic_lr", "lr_schedule", "kl_stop_threshold", "gamma_per_primitive", "max_grad_norm",
           "group_size", "eval_every", "eval_episodes", "seed"),
    "critic": ("placement", "depth", "width"),
}
_SECTION_OF = {key: sec for sec, keys in SECTIONS.items() for key in keys}
_DEFAULTS = RunConfig()


def _parse_value(name: str, text: str):
    default = getattr(_DEFAULTS, name)
    kind = {f.name: f.type for f in fields(RunConfig)}[name]
    text = text.strip()
    optional = "None" in str(kind)
    if optional and text.lower() == "none":
        return None
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            return tuple(int(p) for p in text.split(",") if p.strip())
        if "int" in str(kind):
            return int(text)
        if "float" in str(kind):
            return float(text)
    except ValueError:
        raise ConfigError(f"invalid {name}={text!r}: cannot parse as {kind}") from None
    return text


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    """Parse INI text; ``overrides`` maps field names to raw strings."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[key] = _parse_value(key, raw)
    for key, raw in (overrides or {}).items():
        if key not in _SECTION_OF:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return RunConfig(**values).validate()


def load_config(path, overrides: dict | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, overrides)


def dump_config(config: RunConfig) -> str:
    d = asdict(config)
    out = []
    for section, keys in SECTIONS.items():
        out.append(f"[{section}]")
        for key in keys:
            v = d[key]
            if v is None:
                v = "none"
            elif isinstance(v, (tuple, list)):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            out.append(f"{key} = {v}")
        out.append("")
    return "\n".join(out)
