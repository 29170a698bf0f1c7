"""Macro-step trajectory collection and flattening for policy updates.

A macro-step is one observation, one denoising chain, and ``H`` primitive
env steps executed open-loop.  Denoising sub-steps carry no reward; the
chunk reward is credited to the macro-step as a whole.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .envs import EnvBatch, EnvError, TaskSpec, scripted_expert, to_env_space, to_policy_space
from .policy import DenoisingTrace, FlowPolicy

MDP_KINDS = ("one_layer", "two_layer_full", "two_layer_hybrid")
NOISE_KINDS = ("learned", "sde")


def trace_mode(mdp: str, noise: str) -> str:
    if mdp not in MDP_KINDS:
        raise ValueError(f"mdp must be one of {MDP_KINDS}, got {mdp!r}")
    if noise not in NOISE_KINDS:
        raise ValueError(f"noise must be one of {NOISE_KINDS}, got {noise!r}")
    if mdp == "two_layer_hybrid":
        return "learned_hybrid" if noise == "learned" else "sde_hybrid"
    return "learned_noise" if noise == "learned" else "sde_full"


@dataclass
class MacroTransition:
    obs: np.ndarray
    trace: DenoisingTrace
    executed_chunk: np.ndarray
    reward: float
    done: bool
    value_estimate: float
    mdp_kind: str


@dataclass
class RolloutBuffer:
    """Time-major arrays of shape ``(T, n_envs, ...)``."""

    obs: np.ndarray
    states: np.ndarray  # (T, K + 1, n, D)
    means: np.ndarray  # (T, K, n, D)
    stds: np.ndarray  # (T, K, n, D)
    step_log_probs: np.ndarray  # (T, K, n)
    stochastic: np.ndarray  # (T, K, n)
    prior_log_prob: np.ndarray  # (T, n)
    stochastic_step_index: np.ndarray | None  # (T, n)
    chunks: np.ndarray  # (T, n, H, d_action), policy space
    rewards: np.ndarray
    dones: np.ndarray
    successes: np.ndarray
    values: np.ndarray
    bootstrap: np.ndarray  # (n,)
    valid: np.ndarray
    mdp_kind: str
    trace_mode: str
    group_ids: np.ndarray | None = None
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @property
    def T(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_envs(self) -> int:
        return self.rewards.shape[1]

    def __len__(self) -> int:
        return int(self.valid.sum())

    def transition(self, t: int, i: int) -> MacroTransition:
        k = None if self.stochastic_step_index is None else self.stochastic_step_index[t, i : i + 1]
        trace = DenoisingTrace(
            self.states[t][:, i : i + 1], self.means[t][:, i : i + 1], self.stds[t][:, i : i + 1],
            self.step_log_probs[t][:, i : i + 1], self.stochastic[t][:, i : i + 1],
            self.prior_log_prob[t, i : i + 1], self.trace_mode, k,
        )
        return MacroTransition(
            self.obs[t, i], trace, self.chunks[t, i], float(self.rewards[t, i]),
            bool(self.dones[t, i]), float(self.values[t, i]), self.mdp_kind,
        )

    def fingerprint(self) -> bytes:
        parts = [self.obs, self.states, self.step_log_probs, self.chunks, self.rewards,
                 self.dones, self.values, self.bootstrap]
        return b"".join(np.ascontiguousarray(p).tobytes() for p in parts)


def _empty(T, n, K, D, d_obs, H, d_a):
    return dict(
        obs=np.zeros((T, n, d_obs)), states=np.zeros((T, K + 1, n, D)), means=np.zeros((T, K, n, D)),
        stds=np.zeros((T, K, n, D)), step_log_probs=np.zeros((T, K, n)),
        stochastic=np.zeros((T, K, n), dtype=bool), prior_log_prob=np.zeros((T, n)),
        kstar=np.zeros((T, n), dtype=np.int64), chunks=np.zeros((T, n, H, d_a)),
        rewards=np.zeros((T, n)), dones=np.zeros((T, n), dtype=bool),
        successes=np.zeros((T, n), dtype=bool), values=np.zeros((T, n)), valid=np.zeros((T, n), dtype=bool),
    )


def _value(critic, obs, states, taus):
    if critic is None:
        return np.zeros(len(obs))
    return critic.value(obs, states, taus)[0]


def _run(policy: FlowPolicy, critic, envs: EnvBatch, obs, steps, mode, rng, auto_reset, mdp):
    n, K, D, H = envs.n, policy.denoise_steps, policy.flat_dim, policy.chunk_size
    buf = _empty(steps, n, K, D, obs.shape[1], H, policy.action_dim)
    taus = policy.config.taus
    live = np.ones(n, dtype=bool)
    for t in range(steps):
        trace = policy.sample_trace(obs, mode, rng)
        chunk = trace.terminal.reshape(n, H, policy.action_dim)
        values = _value(critic, obs, trace.states, taus)
        try:
            next_obs, reward, done, _ = envs.step_chunk(to_env_space(chunk), live)
        except EnvError as exc:
            raise EnvError(f"rollout step {t}: {exc}") from exc
        buf["obs"][t] = obs
        buf["states"][t], buf["means"][t], buf["stds"][t] = trace.states, trace.means, trace.stds
        buf["step_log_probs"][t], buf["stochastic"][t] = trace.step_log_probs, trace.stochastic
        buf["prior_log_prob"][t] = trace.prior_log_prob
        if trace.stochastic_step_index is not None:
            buf["kstar"][t] = trace.stochastic_step_index
        buf["chunks"][t] = chunk
        buf["rewards"][t] = np.where(live, reward, 0.0)
        buf["dones"][t] = done & live
        buf["successes"][t] = envs.success & done & live
        buf["values"][t] = values
        buf["valid"][t] = live
        obs = next_obs
        if auto_reset:
            if done.any():
                obs = envs.reset(np.flatnonzero(done))
        else:
            live = live & ~done
    bootstrap = np.zeros(n)
    if auto_reset and critic is not None:
        trace = policy.sample_trace(obs, mode, rng)
        bootstrap = _value(critic, obs, trace.states, taus)
    hybrid = mode.endswith("hybrid")
    out = RolloutBuffer(
        obs=buf["obs"], states=buf["states"], means=buf["means"], stds=buf["stds"],
        step_log_probs=buf["step_log_probs"], stochastic=buf["stochastic"],
        prior_log_prob=buf["prior_log_prob"], stochastic_step_index=buf["kstar"] if hybrid else None,
        chunks=buf["chunks"], rewards=buf["rewards"], dones=buf["dones"], successes=buf["successes"],
        values=buf["values"], bootstrap=bootstrap, valid=buf["valid"], mdp_kind=mdp, trace_mode=mode,
    )
    return out, obs


def collect(policy, envs: EnvBatch, steps: int, mdp: str, noise: str, rng, critic=None, obs=None):
    """Run ``steps`` macro-steps in every env, resetting envs as they finish.

    Returns ``(buffer, obs)`` where ``obs`` is the observation to resume from.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    mode = trace_mode(mdp, noise)
    if obs is None:
        obs = envs.reset()
    return _run(policy, critic, envs, obs, steps, mode, rng, True, mdp)


def collect_groups(policy, envs: EnvBatch, group_size: int, mdp: str, noise: str, rng, critic=None):
    """One episode per env with every ``group_size`` consecutive envs sharing
    an initial state.  Finished envs stay idle (``valid`` is False)."""
    if group_size < 2 or envs.n % group_size:
        raise ValueError(f"n_envs={envs.n} must be a multiple of group_size={group_size} >= 2")
    mode = trace_mode(mdp, noise)
    n_groups = envs.n // group_size
    group_seeds = rng.integers(0, 2**63 - 1, size=n_groups)
    obs = envs.reset(seeds=np.repeat(group_seeds, group_size))
    steps = envs.spec.horizon // policy.chunk_size
    buf, _ = _run(policy, critic, envs, obs, steps, mode, rng, False, mdp)
    buf.group_ids = np.repeat(np.arange(n_groups), group_size)
    return buf


def merge_buffers(buffers: list[RolloutBuffer]) -> RolloutBuffer:
    """Stack equal-length buffers side by side along the env axis."""
    first = buffers[0]
    if any(b.T != first.T or b.mdp_kind != first.mdp_kind for b in buffers):
        raise ValueError("buffers must share length and MDP kind")

    def cat(name, axis):
        parts = [getattr(b, name) for b in buffers]
        return None if parts[0] is None else np.concatenate(parts, axis=axis)

    offsets = np.cumsum([0] + [int(b.group_ids.max()) + 1 if b.group_ids is not None else 0 for b in buffers])
    groups = None
    if first.group_ids is not None:
        groups = np.concatenate([b.group_ids + off for b, off in zip(buffers, offsets)])
    return RolloutBuffer(
        obs=cat("obs", 1), states=cat("states", 2), means=cat("means", 2), stds=cat("stds", 2),
        step_log_probs=cat("step_log_probs", 2), stochastic=cat("stochastic", 2),
        prior_log_prob=cat("prior_log_prob", 1), stochastic_step_index=cat("stochastic_step_index", 1),
        chunks=cat("chunks", 1), rewards=cat("rewards", 1), dones=cat("dones", 1), successes=cat("successes", 1),
        values=cat("values", 1), bootstrap=cat("bootstrap", 0), valid=cat("valid", 1), mdp_kind=first.mdp_kind,
        trace_mode=first.trace_mode, group_ids=groups, advantages=cat("advantages", 1), returns=cat("returns", 1),
    )


@dataclass
class UpdateBatch:
    """Samples for the clipped objective plus the denoising rows behind them.

    ``row_*`` arrays list each recorded stochastic step that enters a
    sample's log-probability; rows of one sample are contiguous.
    """

    sample_macro: np.ndarray  # index into the flattened (T * n) macro-steps
    sample_stochastic: np.ndarray
    old_log_prob: np.ndarray
    sample_prior: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    row_start: np.ndarray  # (n_samples + 1,)
    row_macro: np.ndarray
    row_A: np.ndarray
    row_A_next: np.ndarray
    row_tau: np.ndarray
    macro_obs: np.ndarray  # (T * n, d_obs)
    macro_states: np.ndarray  # (K + 1, T * n, D)
    noise_kind: str
    mdp_kind: str

    def __len__(self) -> int:
        return len(self.sample_macro)

    def rows_for(self, samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Row indices of ``samples`` and, per row, the position of its sample."""
        starts, ends = self.row_start[samples], self.row_start[samples + 1]
        counts = ends - starts
        owner = np.repeat(np.arange(len(samples)), counts)
        offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        return np.repeat(starts, counts) + offsets, owner


def flatten_for_update(buffer: RolloutBuffer, noise: str, delta: float) -> UpdateBatch:
    """one_layer: one sample per macro-step scored by the chain's joint density.
    two_layer_full: one sample per denoising step.  two_layer_hybrid: one
    sample per macro-step at its stochastic step.  Inner samples inherit the
    macro-step advantage."""
    if buffer.advantages is None or buffer.returns is None:
        raise ValueError("advantages must be computed before flattening the buffer")
    T, K, n = buffer.step_log_probs.shape
    D = buffer.states.shape[-1]
    M = T * n
    macro_states = buffer.states.transpose(1, 0, 2, 3).reshape(K + 1, M, D)
    step_logp = buffer.step_log_probs.transpose(1, 0, 2).reshape(K, M)
    stoch = buffer.stochastic.transpose(1, 0, 2).reshape(K, M)
    valid = buffer.valid.reshape(M)
    adv = buffer.advantages.reshape(M)
    ret = buffer.returns.reshape(M)
    prior = buffer.prior_log_prob.reshape(M)
    macros = np.flatnonzero(valid)
    taus = np.arange(K) * delta

    if buffer.mdp_kind == "one_layer":
        s_macro = macros
        s_steps = [np.flatnonzero(stoch[:, m]) for m in macros]
        s_prior = prior[macros]
        old = prior[macros] + step_logp[:, macros].sum(axis=0)
    elif buffer.mdp_kind == "two_layer_full":
        s_macro = np.repeat(macros, K)
        ks = np.tile(np.arange(K), len(macros))
        s_steps = [np.array([k]) if stoch[k, m] else np.array([], dtype=np.int64) for m, k in zip(s_macro, ks)]
        s_prior = np.zeros(len(s_macro))
        old = step_logp[ks, s_macro]
    elif buffer.mdp_kind == "two_layer_hybrid":
        s_macro = macros
        ks = buffer.stochastic_step_index.reshape(M)[macros]
        s_steps = [np.array([k]) if stoch[k, m] else np.array([], dtype=np.int64) for m, k in zip(s_macro, ks)]
        s_prior = np.zeros(len(s_macro))
        old = step_logp[ks, s_macro]
    else:
        raise ValueError(f"unknown mdp kind {buffer.mdp_kind!r}")

    counts = np.array([len(s) for s in s_steps], dtype=np.int64)
    row_start = np.concatenate([[0], np.cumsum(counts)])
    row_k = np.concatenate(s_steps).astype(np.int64) if counts.sum() else np.zeros(0, dtype=np.int64)
    row_macro = np.repeat(s_macro, counts)
    return UpdateBatch(
        sample_macro=s_macro, sample_stochastic=counts > 0, old_log_prob=np.asarray(old, dtype=np.float64),
        sample_prior=s_prior, advantages=adv[s_macro], returns=ret[s_macro], row_start=row_start,
        row_macro=row_macro, row_A=macro_states[row_k, row_macro], row_A_next=macro_states[row_k + 1, row_macro],
        row_tau=taus[row_k], macro_obs=buffer.obs.reshape(M, -1), macro_states=macro_states,
        noise_kind=noise, mdp_kind=buffer.mdp_kind,
    )


class ExpertActor:
    """Chunk actor that plays the scripted expert open-loop on a copy of the envs."""

    def __call__(self, obs, envs: EnvBatch, H: int, rng) -> np.ndarray:
        sim = copy.deepcopy(envs)
        out = np.zeros((envs.n, H, 3))
        live = np.ones(envs.n, dtype=bool)
        for j in range(H):
            raw = scripted_expert(sim)
            out[:, j] = to_policy_space(raw)
            _, _, d = sim.step(raw, live)
            live &= ~d
        return out


def eval_seed(seed: int) -> int:
    """Seed of the held-out evaluation episodes for a run seeded with ``seed``."""
    return int(np.random.SeedSequence([seed, 99]).generate_state(1)[0])


def evaluate(policy: FlowPolicy, spec: TaskSpec, episodes: int, seed: int = 0, actor=None, chunk_size=None):
    """Deterministic-ODE success rate over ``episodes`` seeded episodes.

    Returns ``(success_rate, per_task)`` where ``per_task`` maps task id to
    ``(successes, episodes)``.
    """
    H = policy.chunk_size if chunk_size is None else chunk_size
    envs = EnvBatch(spec, episodes, seed)
    obs = envs.reset()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    live = np.ones(episodes, dtype=bool)
    while live.any():
        if actor is None:
            noise = rng.standard_normal((episodes, policy.flat_dim))
            chunk = policy.sample_ode(obs, noise).reshape(episodes, H, -1)
        else:
            chunk = actor(obs, envs, H, rng)
        obs, _, done, _ = envs.step_chunk(to_env_space(chunk), live)
        live &= ~done
    per_task: dict[int, tuple[int, int]] = {}
    for task in np.unique(envs.task):
        sel = envs.task == task
        per_task[int(task)] = (int(envs.success[sel].sum()), int(sel.sum()))
    return float(envs.success.mean()), per_task
