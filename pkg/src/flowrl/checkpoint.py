"""Save and restore a policy (and optionally its critic) in one file."""

from __future__ import annotations

import os
from pathlib import Path

from .algo import Critic, CriticConfig
from .nn import read_checkpoint, write_checkpoint
from .policy import FlowPolicy


def save(path, policy: FlowPolicy, critic: Critic | None = None, extra: dict | None = None) -> None:
    """Write atomically: a crash mid-write leaves any previous file intact."""
    params = policy.get_params()
    params["hidden_sizes"] = list(params["hidden_sizes"])
    meta = {"policy": params, "n_features_in": policy.n_features_in_, "extra": extra or {}}
    nets = dict(policy.nets)
    if critic is not None:
        meta["critic"] = {"placement": critic.config.placement, "depth": critic.config.depth,
                          "width": critic.config.width}
        nets["critic"] = critic.net
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        write_checkpoint(fh, nets, meta)
    os.replace(tmp, path)


def load(path) -> tuple[FlowPolicy, Critic | None, dict]:
    with open(path, "rb") as fh:
        nets, meta = read_checkpoint(fh)
    params = dict(meta["policy"])
    params["hidden_sizes"] = tuple(params["hidden_sizes"])
    policy = FlowPolicy(**params)
    policy.n_features_in_ = int(meta["n_features_in"])
    policy.velocity_net_ = nets["velocity"]
    policy.noise_net_ = nets["noise"]
    policy.loss_curve_ = []
    policy.probe_loss_curve_ = []
    critic = None
    if "critic" in meta:
        cfg = CriticConfig(**meta["critic"])
        critic = Critic(cfg, policy.n_features_in_, policy.flat_dim, policy.time_feature_dim,
                        policy.activation, net=nets["critic"])
    return policy, critic, meta.get("extra", {})
