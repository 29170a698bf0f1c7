"""PPO and GRPO for flow policies, with two critic placements."""

from __future__ import annotations

import copy
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .envs import EnvBatch, TaskSpec
from .nn import Adam, GradStore, Mlp
from .policy import FlowPolicy, time_features
from .rollout import (
    MDP_KINDS, NOISE_KINDS, collect, collect_groups, eval_seed, evaluate, flatten_for_update, merge_buffers,
)

CRITIC_PLACEMENTS = ("obs_head", "expert_head")
CRITIC_DEPTHS = {"mlp1": 1, "mlp4": 4}
METHODS = {
    "flow_noise": ("learned", "one_layer"),
    "flow_sde_full": ("sde", "two_layer_full"),
    "flow_sde_hybrid": ("sde", "two_layer_hybrid"),
}


def gae(rewards, values, dones, gamma: float, lam: float):
    """Generalized advantage estimates; ``values`` carries one bootstrap row.

    Works on ``(T,)`` or ``(T, n)`` arrays.  Returns ``(advantages, returns)``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    T = rewards.shape[0]
    if values.shape[0] != T + 1 or dones.shape != rewards.shape or values.shape[1:] != rewards.shape[1:]:
        raise ValueError(
            f"length mismatch: rewards {rewards.shape}, values {values.shape}, dones {dones.shape}"
        )
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1:])
    for t in range(T - 1, -1, -1):
        notdone = 1.0 - dones[t]
        td = rewards[t] + gamma * values[t + 1] * notdone - values[t]
        running = td + gamma * lam * notdone * running
        adv[t] = running
    return adv, adv + values[:T]


def grpo_advantages(rewards, group_size: int | None = None) -> np.ndarray:
    """Normalize each group's rewards to mean 0, population std 1.

    ``rewards`` is ``(n_groups, G)``, or flat with ``group_size`` given.
    Groups whose std is below 1e-8 get zero advantages.
    """
    r = np.asarray(rewards, dtype=np.float64)
    shape = r.shape
    if group_size is not None:
        r = r.reshape(-1, group_size)
    if r.ndim != 2 or r.shape[1] < 2:
        raise ValueError(f"need groups of at least 2 rewards, got shape {shape}")
    mean = r.mean(axis=1, keepdims=True)
    std = r.std(axis=1, keepdims=True)
    degenerate = std <= 1e-8
    out = np.where(degenerate, 0.0, (r - mean) / np.where(degenerate, 1.0, std))
    return out.reshape(shape)


def explained_variance(returns, values) -> float:
    returns = np.asarray(returns, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    var = returns.var()
    if var == 0.0:
        return -math.inf
    return float(1.0 - (returns - values).var() / var)


def approx_kl(old_log_probs, new_log_probs) -> float:
    """Mean of ``rho - 1 - log rho``; nonnegative by convexity."""
    log_ratio = np.asarray(new_log_probs, dtype=np.float64) - np.asarray(old_log_probs, dtype=np.float64)
    if log_ratio.size == 0:
        return 0.0
    return float(np.mean(np.expm1(log_ratio) - log_ratio))


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    lr = base_lr * 0.5 * (1.0 + math.cos(math.pi * step / max(total_steps, 1)))
    return max(lr, base_lr / 100.0)


def clipped_surrogate(ratio, advantages, clip: float):
    """Per-sample ``min(rho A, clip(rho) A)`` and its derivative in ``rho``."""
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    obj = np.minimum(unclipped, clipped)
    d_ratio = np.where(unclipped <= clipped, adv, 0.0)
    return obj, d_ratio


@dataclass
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    update_epochs: int = 2
    minibatch_size: int = 256
    entropy_coef: float = 0.005
    value_coef: float = 0.5
    lr_schedule: str = "constant"
    kl_stop_threshold: float | None = None
    gamma_per_primitive: bool = False
    max_grad_norm: float | None = 1.0

    def validate(self) -> None:
        checks = {
            "gamma": 0.0 < self.gamma <= 1.0,
            "gae_lambda": 0.0 <= self.gae_lambda <= 1.0,
            "clip_ratio": self.clip_ratio > 0.0,
            "update_epochs": self.update_epochs >= 1,
            "minibatch_size": self.minibatch_size >= 1,
            "entropy_coef": self.entropy_coef >= 0.0,
            "value_coef": self.value_coef >= 0.0,
            "lr_schedule": self.lr_schedule in ("constant", "cosine"),
            "kl_stop_threshold": self.kl_stop_threshold is None or self.kl_stop_threshold > 0,
        }
        for name, ok in checks.items():
            if not ok:
                raise ValueError(f"invalid {name}={getattr(self, name)!r}")


@dataclass
class CriticConfig:
    placement: str = "obs_head"
    depth: str = "mlp4"
    width: int = 64

    def validate(self) -> None:
        if self.placement not in CRITIC_PLACEMENTS:
            raise ValueError(f"invalid placement={self.placement!r}; expected one of {CRITIC_PLACEMENTS}")
        if self.depth not in CRITIC_DEPTHS:
            raise ValueError(f"invalid depth={self.depth!r}; expected one of {tuple(CRITIC_DEPTHS)}")
        if self.width < 1:
            raise ValueError(f"invalid width={self.width!r}")


@dataclass
class UpdateMetrics:
    policy_loss: float = 0.0
    value_loss: float | None = None
    approx_kl: float = 0.0
    clip_fraction: float = 0.0
    explained_variance: float | None = None
    entropy: float | None = None


class Critic:
    """State-value head.

    ``obs_head`` reads the observation only.  ``expert_head`` reads
    ``(obs, A_tau, tau)`` and averages over the K + 1 states of a denoising
    chain.
    """

    def __init__(self, config: CriticConfig, d_obs: int, flat_dim: int, time_feature_dim: int = 8,
                 activation: str = "silu", rng: np.random.Generator | None = None, net: Mlp | None = None):
        config.validate()
        self.config = config
        self.d_obs = d_obs
        self.flat_dim = flat_dim
        self.time_feature_dim = time_feature_dim
        d_in = d_obs if config.placement == "obs_head" else d_obs + flat_dim + 1 + time_feature_dim
        sizes = [d_in] + [config.width] * CRITIC_DEPTHS[config.depth] + [1]
        self.net = net if net is not None else Mlp(sizes, activation, rng)

    def new_grads(self) -> GradStore:
        return self.net.new_grads()

    def value(self, obs, states=None, taus=None, grads: GradStore | None = None):
        """Values ``(n,)`` and a ``backward(d_values)`` closure."""
        obs = np.asarray(obs, dtype=np.float64)
        n = len(obs)
        if self.config.placement == "obs_head":
            out, cache = self.net.forward(obs)

            def backward(d):
                self.net.backward(cache, np.asarray(d, dtype=np.float64)[:, None], grads)

            return out[:, 0], backward
        if states is None:
            raise ValueError("expert_head critic needs the denoising trace states")
        states = np.asarray(states, dtype=np.float64)
        S = states.shape[0]
        if taus is None:
            taus = np.linspace(0.0, 1.0, S)
        tf = time_features(np.repeat(taus, n), self.time_feature_dim)
        x = np.concatenate([np.tile(obs, (S, 1)), states.reshape(S * n, -1), tf], axis=1)
        out, cache = self.net.forward(x)
        vals = out[:, 0].reshape(S, n).mean(axis=0)

        def backward(d):
            g = np.tile(np.asarray(d, dtype=np.float64) / S, S)[:, None]
            self.net.backward(cache, g, grads)

        return vals, backward


def value_estimate(critic: Critic, obs, trace=None, taus=None) -> np.ndarray:
    if critic.config.placement == "expert_head" and trace is None:
        raise ValueError("expert_head placement requires a denoising trace")
    states = None if trace is None else trace.states
    return critic.value(obs, states, taus)[0]


def ppo_loss(policy: FlowPolicy, critic: Critic | None, batch, samples: np.ndarray, config: PpoConfig,
             policy_grads=None, critic_grads=None, use_entropy: bool = False):
    """Clipped surrogate (+ value MSE, - entropy bonus) on ``samples`` of ``batch``.

    Accumulates gradients when stores are given.  Returns ``(loss, metrics, ratios)``.
    """
    samples = np.asarray(samples)
    rows, owner = batch.rows_for(samples)
    n = len(samples)
    new_logp = batch.sample_prior[samples].copy()
    terms = None
    if len(rows):
        terms = policy.step_terms(
            batch.macro_obs[batch.row_macro[rows]], batch.row_A[rows], batch.row_A_next[rows],
            batch.row_tau[rows], batch.noise_kind, policy_grads, want_entropy=use_entropy,
        )
        new_logp += np.bincount(owner, weights=terms.logp, minlength=n)
    old = batch.old_log_prob[samples]
    log_ratio = new_logp - old
    ratio = np.exp(log_ratio)
    bad = ~np.isfinite(ratio)
    if bad.any():
        raise FloatingPointError(f"non-finite probability ratio at sample {int(samples[np.flatnonzero(bad)[0]])}")
    live = batch.sample_stochastic[samples]
    n_live = max(int(live.sum()), 1)
    adv = batch.advantages[samples]
    obj, d_ratio = clipped_surrogate(ratio, adv, config.clip_ratio)
    policy_loss = -float(np.sum(obj[live]) / n_live)
    metrics = UpdateMetrics(
        policy_loss=policy_loss,
        approx_kl=approx_kl(old[live], new_logp[live]),
        clip_fraction=float(np.mean(np.abs(ratio[live] - 1.0) > config.clip_ratio)) if live.any() else 0.0,
    )
    loss = policy_loss
    entropy = None
    if use_entropy and terms is not None and terms.entropy is not None and len(rows):
        entropy = float(terms.entropy.mean())
        metrics.entropy = entropy
        loss -= config.entropy_coef * entropy
    if terms is not None and policy_grads is not None:
        d_logp = np.where(live, -d_ratio * ratio / n_live, 0.0)[owner]
        d_ent = None
        if entropy is not None:
            d_ent = np.full(len(rows), -config.entropy_coef / len(rows))
        terms.backward(d_logp, d_ent)
    if critic is not None:
        macros = batch.sample_macro[samples]
        values, vback = critic.value(batch.macro_obs[macros], batch.macro_states[:, macros], None, critic_grads)
        err = values - batch.returns[samples]
        value_loss = float(np.mean(err**2))
        metrics.value_loss = value_loss
        loss += config.value_coef * value_loss
        if critic_grads is not None:
            vback(config.value_coef * 2.0 * err / n)
    return loss, metrics, ratio


@dataclass
class MetricsRecord:
    update: int
    lr: float
    train_success_rate: float
    train_return: float
    eval_success_rate: float | None
    n_samples: int
    policy_loss: float
    value_loss: float | None
    approx_kl: float
    clip_fraction: float
    explained_variance: float | None
    entropy: float | None
    first_epoch_max_ratio_dev: float
    wall_seconds: float = field(default=0.0, compare=False)

    def log_dict(self) -> dict:
        """Deterministic fields only; wall-clock time is logged separately."""
        d = asdict(self)
        d.pop("wall_seconds")
        return d


class FlowRLTrainer(BaseEstimator):
    """RL fine-tuning of a :class:`FlowPolicy` on a synthetic task.

    ``method`` picks the noise source and MDP formulation; ``noise`` and
    ``mdp`` override either half for ablations.
    """

    def __init__(
        self,
        method: str = "flow_sde_hybrid",
        algorithm: str = "ppo",
        noise: str | None = None,
        mdp: str | None = None,
        n_envs: int = 64,
        macro_steps: int | None = None,
        train_epochs: int = 200,
        gamma: float = 0.99,
        gae_lambda: float = 0.95,
        clip_ratio: float = 0.2,
        update_epochs: int = 2,
        minibatch_size: int = 256,
        entropy_coef: float = 0.005,
        value_coef: float = 0.5,
        actor_lr: float = 3e-4,
        critic_lr: float = 1e-3,
        lr_schedule: str = "constant",
        kl_stop_threshold: float | None = None,
        gamma_per_primitive: bool = False,
        max_grad_norm: float | None = 1.0,
        critic_placement: str = "obs_head",
        critic_depth: str = "mlp4",
        critic_width: int = 64,
        group_size: int = 8,
        eval_every: int = 20,
        eval_episodes: int = 128,
        random_state: int = 0,
    ):
        self.method = method
        self.algorithm = algorithm
        self.noise = noise
        self.mdp = mdp
        self.n_envs = n_envs
        self.macro_steps = macro_steps
        self.train_epochs = train_epochs
        self.gamma = gamma
        self.gae_lambda = gae_lambda
        self.clip_ratio = clip_ratio
        self.update_epochs = update_epochs
        self.minibatch_size = minibatch_size
        self.entropy_coef = entropy_coef
        self.value_coef = value_coef
        self.actor_lr = actor_lr
        self.critic_lr = critic_lr
        self.lr_schedule = lr_schedule
        self.kl_stop_threshold = kl_stop_threshold
        self.gamma_per_primitive = gamma_per_primitive
        self.max_grad_norm = max_grad_norm
        self.critic_placement = critic_placement
        self.critic_depth = critic_depth
        self.critic_width = critic_width
        self.group_size = group_size
        self.eval_every = eval_every
        self.eval_episodes = eval_episodes
        self.random_state = random_state

    @property
    def ppo_config(self) -> PpoConfig:
        return PpoConfig(
            gamma=self.gamma, gae_lambda=self.gae_lambda, clip_ratio=self.clip_ratio,
            update_epochs=self.update_epochs, minibatch_size=self.minibatch_size,
            entropy_coef=self.entropy_coef, value_coef=self.value_coef, lr_schedule=self.lr_schedule,
            kl_stop_threshold=self.kl_stop_threshold, gamma_per_primitive=self.gamma_per_primitive,
            max_grad_norm=self.max_grad_norm,
        )

    @property
    def critic_config(self) -> CriticConfig:
        return CriticConfig(self.critic_placement, self.critic_depth, self.critic_width)

    def resolved(self) -> tuple[str, str]:
        if self.method not in METHODS:
            raise ValueError(f"invalid method={self.method!r}; expected one of {tuple(METHODS)}")
        noise, mdp = METHODS[self.method]
        noise = self.noise or noise
        mdp = self.mdp or mdp
        if noise not in NOISE_KINDS:
            raise ValueError(f"invalid noise={noise!r}")
        if mdp not in MDP_KINDS:
            raise ValueError(f"invalid mdp={mdp!r}")
        return noise, mdp

    def _validate(self, task: TaskSpec, policy: FlowPolicy) -> None:
        self.ppo_config.validate()
        if self.algorithm not in ("ppo", "grpo"):
            raise ValueError(f"invalid algorithm={self.algorithm!r}")
        if self.algorithm == "ppo":
            self.critic_config.validate()
        if self.algorithm == "grpo" and (self.group_size < 2 or self.n_envs % self.group_size):
            raise ValueError(f"invalid group_size={self.group_size!r} for n_envs={self.n_envs}")
        if self.n_envs < 1:
            raise ValueError(f"invalid n_envs={self.n_envs!r}")
        if self.train_epochs < 0:
            raise ValueError(f"invalid train_epochs={self.train_epochs!r}")
        task.validate(policy.chunk_size)
        if task.d_obs != policy.n_features_in_:
            raise ValueError(f"policy expects {policy.n_features_in_} obs features, task provides {task.d_obs}")
        self.resolved()

    def init_critic(self, policy: FlowPolicy) -> Critic | None:
        if self.algorithm != "ppo":
            return None
        rng = np.random.default_rng(np.random.SeedSequence([self.random_state, 3]))
        return Critic(self.critic_config, policy.n_features_in_, policy.flat_dim, policy.time_feature_dim,
                      policy.activation, rng)

    def fit(self, policy: FlowPolicy, task: TaskSpec, critic: Critic | None = None, callback=None):
        """Train a copy of ``policy``; results land in ``policy_``, ``critic_``, ``history_``.

        ``callback(record, trainer)`` runs after every update; raising from
        it stops training.
        """
        self._validate(task, policy)
        noise, mdp = self.resolved()
        self.noise_kind_, self.mdp_kind_ = noise, mdp
        cfg = self.ppo_config
        self.policy_ = copy.deepcopy(policy)
        self.critic_ = critic if critic is not None else self.init_critic(self.policy_)
        if self.algorithm == "grpo":
            self.critic_ = None
        pol = self.policy_
        actor_nets = [pol.velocity_net_] + ([pol.noise_net_] if noise == "learned" else [])
        actor_opt = Adam(actor_nets, self.actor_lr, cfg.max_grad_norm)
        critic_opt = Adam([self.critic_.net], self.critic_lr, cfg.max_grad_norm) if self.critic_ else None
        ss = np.random.SeedSequence(self.random_state)
        env_seed, roll_seed, shuffle_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
        held_out = eval_seed(self.random_state)
        envs = EnvBatch(task, self.n_envs, env_seed)
        rng = np.random.default_rng(roll_seed)
        shuffle_rng = np.random.default_rng(shuffle_seed)
        steps = self.macro_steps or task.horizon // pol.chunk_size
        gamma = cfg.gamma ** pol.chunk_size if cfg.gamma_per_primitive else cfg.gamma
        use_entropy = noise == "learned" and cfg.entropy_coef > 0
        self.history_: list[MetricsRecord] = []
        obs = None
        for update in range(self.train_epochs):
            t0 = time.perf_counter()
            lr_scale = 1.0
            if cfg.lr_schedule == "cosine":
                lr_scale = cosine_lr(1.0, update, max(self.train_epochs, 1))
            if self.algorithm == "ppo":
                buf, obs = collect(pol, envs, steps, mdp, noise, rng, self.critic_, obs)
                values = np.concatenate([buf.values, buf.bootstrap[None]], axis=0)
                buf.advantages, buf.returns = gae(buf.rewards, values, buf.dones, gamma, cfg.gae_lambda)
            else:
                # Enough grouped episodes to match the PPO macro-step budget.
                rounds = max(1, steps // (task.horizon // pol.chunk_size))
                buf = merge_buffers([collect_groups(pol, envs, self.group_size, mdp, noise, rng)
                                     for _ in range(rounds)])
                episode_return = buf.rewards.sum(axis=0)
                adv = grpo_advantages(episode_return, self.group_size)
                buf.advantages = np.broadcast_to(adv, buf.rewards.shape).copy()
                buf.returns = buf.advantages.copy()
            batch = flatten_for_update(buf, noise, pol.config.delta)
            live = batch.sample_stochastic
            if live.sum() > 1 and self.algorithm == "ppo":
                a = batch.advantages
                batch.advantages = (a - a[live].mean()) / (a[live].std() + 1e-8)
            metrics_acc: list[UpdateMetrics] = []
            first_dev = 0.0
            stop = False
            for epoch in range(cfg.update_epochs):
                order = shuffle_rng.permutation(len(batch))
                for start in range(0, len(batch), cfg.minibatch_size):
                    idx = order[start : start + cfg.minibatch_size]
                    pgrads = pol.new_grads()
                    cgrads = self.critic_.new_grads() if self.critic_ else None
                    _, m, ratio = ppo_loss(pol, self.critic_, batch, idx, cfg, pgrads, cgrads, use_entropy)
                    if epoch == 0 and start == 0:
                        first_dev = float(np.max(np.abs(ratio - 1.0))) if len(ratio) else 0.0
                    actor_opt.step([pgrads[net_name] for net_name in ("velocity", "noise")[: len(actor_nets)]],
                                   lr=self.actor_lr * lr_scale)
                    if critic_opt is not None:
                        critic_opt.step([cgrads], lr=self.critic_lr * lr_scale)
                    metrics_acc.append(m)
                    if cfg.kl_stop_threshold is not None and m.approx_kl > cfg.kl_stop_threshold:
                        stop = True
                        break
                if stop:
                    break
            rec = self._record(update, buf, batch, metrics_acc, first_dev, self.actor_lr * lr_scale)
            if self.eval_every and ((update + 1) % self.eval_every == 0 or update + 1 == self.train_epochs):
                rec.eval_success_rate, _ = evaluate(pol, task, self.eval_episodes, held_out)
            rec.wall_seconds = time.perf_counter() - t0
            if not all(math.isfinite(v) for v in (rec.policy_loss, rec.approx_kl)) or (
                rec.value_loss is not None and not math.isfinite(rec.value_loss)
            ):
                raise FloatingPointError(f"non-finite loss at update {update}")
            self.history_.append(rec)
            if callback is not None:
                callback(rec, self)
        return self

    def _record(self, update, buf, batch, metrics_acc, first_dev, lr) -> MetricsRecord:
        def avg(name):
            vals = [getattr(m, name) for m in metrics_acc if getattr(m, name) is not None]
            return float(np.mean(vals)) if vals else None

        ended = buf.dones & buf.valid
        n_eps = int(ended.sum())
        train_sr = float(buf.successes.sum() / n_eps) if n_eps else 0.0
        train_ret = float(buf.rewards.sum() / max(n_eps, 1))
        ev = None
        if self.algorithm == "ppo":
            ev = explained_variance(buf.returns[buf.valid], buf.values[buf.valid])
            ev = None if not math.isfinite(ev) else ev
        return MetricsRecord(
            update=update, lr=lr, train_success_rate=train_sr, train_return=train_ret, eval_success_rate=None,
            n_samples=len(batch), policy_loss=avg("policy_loss") or 0.0, value_loss=avg("value_loss"),
            approx_kl=avg("approx_kl") or 0.0, clip_fraction=avg("clip_fraction") or 0.0,
            explained_variance=ev, entropy=avg("entropy"), first_epoch_max_ratio_dev=first_dev,
        )
