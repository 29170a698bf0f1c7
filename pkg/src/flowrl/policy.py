"""Flow-matching action policy with deterministic and stochastic samplers.

Time runs from ``tau = 0`` (pure noise) to ``tau = 1`` (action) on the
rectified path ``A_tau = tau * A + (1 - tau) * eps``.  Chunks are handled
flattened as ``(n, H * d_action)`` internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_chunks, check_is_fitted, check_obs
from .nn import Adam, GradStore, Mlp, sigmoid

LOG_2PI = math.log(2.0 * math.pi)

TRACE_MODES = ("ode", "sde_full", "sde_hybrid", "learned_noise", "learned_hybrid")


def time_features(tau, dim: int = 8) -> np.ndarray:
    """``[tau, sin(w_j tau)..., cos(w_j tau)...]`` with ``w_j = pi * 2**j``.

    Accepts a scalar (returns ``(1 + dim,)``) or an array of times
    (returns ``(n, 1 + dim)``).
    """
    if dim % 2:
        raise ValueError(f"time_feature_dim must be even, got {dim}")
    t = np.asarray(tau, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
        raise ValueError(f"tau must lie in [0, 1], got {tau!r}")
    freqs = math.pi * 2.0 ** np.arange(dim // 2)
    ang = t[..., None] * freqs
    return np.concatenate([t[..., None], np.sin(ang), np.cos(ang)], axis=-1)


def noise_schedule(tau, a: float):
    """SDE diffusion scale ``a * sqrt(tau / (1 - tau))``; defined for ``0 <= tau < 1``."""
    t = np.asarray(tau, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t >= 1.0):
        raise ValueError(f"noise schedule is defined on [0, 1), got tau={tau!r}")
    out = a * np.sqrt(t / (1.0 - t))
    return float(out) if out.ndim == 0 else out


def sde_drift_gain(tau, a: float):
    """``sigma_tau**2 / (2 (1 - tau))``, the weight on the score correction."""
    t = np.asarray(tau, dtype=np.float64)
    return a * a * t / (2.0 * (1.0 - t) ** 2)


def sde_step_moments(A, v, tau, delta: float, a: float):
    """Euler-Maruyama Gaussian step of the marginal-preserving SDE.

    The score of the rectified path is ``-(A - tau v) / (1 - tau)``, so the
    drift ``v + sigma**2 / 2 * score`` becomes ``v - gain * (A - tau v)``.
    ``tau`` is a scalar or one time per row.  Returns ``(mean, step_std)``.
    """
    A = np.asarray(A, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    t = np.asarray(tau, dtype=np.float64)
    sig = np.asarray(noise_schedule(t, a))
    gain = sde_drift_gain(t, a)
    if t.ndim and A.ndim > 1:
        t, gain = t[:, None], gain[:, None]
    mean = A + (v - gain * (A - t * v)) * delta
    return mean, sig * math.sqrt(delta)


def gaussian_log_prob(x, mu, sigma) -> np.ndarray | float:
    """Diagonal Gaussian log density summed over the last axis.

    Zero ``sigma`` is allowed only where ``x == mu``; those entries add 0.
    """
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), np.broadcast(x, mu).shape)
    r = x - mu
    zero = sigma <= 0.0
    if np.any(zero & (r != 0.0)):
        raise ValueError("non-positive sigma with x != mu")
    safe = np.where(zero, 1.0, sigma)
    terms = -0.5 * LOG_2PI - np.log(safe) - 0.5 * (r / safe) ** 2
    terms = np.where(zero, 0.0, terms)
    out = terms.sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def gaussian_entropy(sigma) -> np.ndarray:
    return 0.5 * np.log(2.0 * math.pi * math.e * np.asarray(sigma, dtype=np.float64) ** 2)


@dataclass
class PolicyConfig:
    d_obs: int
    d_action: int = 3
    chunk_size: int = 5
    denoise_steps: int = 4
    noise_level: float = 0.5
    sigma_min: float = 0.08
    sigma_max: float = 0.16
    time_feature_dim: int = 8

    def validate(self) -> None:
        checks = {
            "d_obs": self.d_obs >= 1,
            "d_action": self.d_action >= 1,
            "chunk_size": self.chunk_size >= 1,
            "denoise_steps": self.denoise_steps >= 1,
            "noise_level": self.noise_level >= 0.0,
            "sigma_min": 0.0 < self.sigma_min <= self.sigma_max,
            "sigma_max": self.sigma_max >= self.sigma_min,
            "time_feature_dim": self.time_feature_dim >= 0 and self.time_feature_dim % 2 == 0,
        }
        for name, ok in checks.items():
            if not ok:
                raise ValueError(f"invalid {name}={getattr(self, name)!r}")

    @property
    def delta(self) -> float:
        return 1.0 / self.denoise_steps

    @property
    def taus(self) -> np.ndarray:
        return np.arange(self.denoise_steps + 1) * self.delta


@dataclass
class DenoisingTrace:
    """One denoising chain per row.  Leading axes: step, then batch."""

    states: np.ndarray  # (K + 1, n, D)
    means: np.ndarray  # (K, n, D)
    stds: np.ndarray  # (K, n, D)
    step_log_probs: np.ndarray  # (K, n); 0 on deterministic steps
    stochastic: np.ndarray  # (K, n) bool
    prior_log_prob: np.ndarray  # (n,)
    mode: str
    stochastic_step_index: np.ndarray | None = None  # (n,) for hybrid modes

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]

    @property
    def joint_log_prob(self) -> np.ndarray:
        return self.prior_log_prob + self.step_log_probs.sum(axis=0)

    def row(self, i: int) -> "DenoisingTrace":
        k = None if self.stochastic_step_index is None else self.stochastic_step_index[i : i + 1]
        return DenoisingTrace(
            self.states[:, i : i + 1], self.means[:, i : i + 1], self.stds[:, i : i + 1],
            self.step_log_probs[:, i : i + 1], self.stochastic[:, i : i + 1],
            self.prior_log_prob[i : i + 1], self.mode, k,
        )


class StepTerms:
    """Log-probs (and optional entropies) of a batch of recorded denoising steps,
    with a backward pass into the policy's gradient stores."""

    def __init__(self, logp, entropy, backward: Callable[[np.ndarray, np.ndarray | None], None]):
        self.logp = logp
        self.entropy = entropy
        self._backward = backward

    def backward(self, d_logp: np.ndarray, d_entropy: np.ndarray | None = None) -> None:
        self._backward(d_logp, d_entropy)


class FlowPolicy(BaseEstimator):
    """Observation-conditioned flow-matching policy over action chunks.

    ``fit`` runs supervised flow matching on ``(obs, chunk)`` pairs;
    ``predict`` integrates the learned field deterministically; ``sample``
    draws stochastic denoising traces for RL.
    """

    def __init__(
        self,
        action_dim: int = 3,
        chunk_size: int = 5,
        denoise_steps: int = 4,
        noise_level: float = 0.5,
        sigma_min: float = 0.08,
        sigma_max: float = 0.16,
        time_feature_dim: int = 8,
        hidden_sizes: tuple = (128, 128),
        activation: str = "silu",
        n_epochs: int = 300,
        batch_size: int = 64,
        learning_rate: float = 1e-3,
        random_state: int | None = 0,
    ):
        self.action_dim = action_dim
        self.chunk_size = chunk_size
        self.denoise_steps = denoise_steps
        self.noise_level = noise_level
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max
        self.time_feature_dim = time_feature_dim
        self.hidden_sizes = hidden_sizes
        self.activation = activation
        self.n_epochs = n_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    # -- construction -------------------------------------------------

    @property
    def config(self) -> PolicyConfig:
        return self.config_for(getattr(self, "n_features_in_", 1))

    def config_for(self, d_obs: int) -> PolicyConfig:
        return PolicyConfig(
            d_obs=d_obs,
            d_action=self.action_dim,
            chunk_size=self.chunk_size,
            denoise_steps=self.denoise_steps,
            noise_level=self.noise_level,
            sigma_min=self.sigma_min,
            sigma_max=self.sigma_max,
            time_feature_dim=self.time_feature_dim,
        )

    @property
    def flat_dim(self) -> int:
        return self.chunk_size * self.action_dim

    def initialize(self, n_features: int) -> "FlowPolicy":
        """Build fresh networks for ``n_features``-dimensional observations."""
        self.n_features_in_ = int(n_features)
        self.config.validate()
        rng = np.random.default_rng(self.random_state)
        d_in = self.n_features_in_ + self.flat_dim + 1 + self.time_feature_dim
        sizes = [d_in, *self.hidden_sizes, self.flat_dim]
        self.velocity_net_ = Mlp(sizes, self.activation, rng, final_scale=0.01)
        self.noise_net_ = Mlp(sizes, self.activation, rng, final_scale=0.01)
        self.loss_curve_ = []
        self.probe_loss_curve_ = []
        return self

    @property
    def nets(self) -> dict[str, Mlp]:
        return {"velocity": self.velocity_net_, "noise": self.noise_net_}

    def new_grads(self) -> dict[str, GradStore]:
        return {name: net.new_grads() for name, net in self.nets.items()}

    # -- network evaluation --------------------------------------------

    def _net_input(self, obs, A, tau) -> np.ndarray:
        n = A.shape[0]
        tf = time_features(np.broadcast_to(np.asarray(tau, dtype=np.float64), (n,)), self.time_feature_dim)
        return np.concatenate([obs, A, tf], axis=1)

    def velocity(self, obs, A, tau):
        """Velocity field on flattened chunks; returns ``(v, cache)``."""
        return self.velocity_net_.forward(self._net_input(obs, A, tau))

    def _velocity_backward(self, cache, grad_v, grads) -> None:
        if cache is not None:
            self.velocity_net_.backward(cache, grad_v, grads["velocity"])

    def noise_std(self, obs, A, tau):
        """Per-dimension std in ``[sigma_min, sigma_max]``; returns ``(sigma, (cache, s))``."""
        z, cache = self.noise_net_.forward(self._net_input(obs, A, tau))
        s = sigmoid(z)
        return self.sigma_min + (self.sigma_max - self.sigma_min) * s, (cache, s)

    def _noise_backward(self, aux, grad_sigma, grads) -> None:
        cache, s = aux
        dz = grad_sigma * (self.sigma_max - self.sigma_min) * s * (1.0 - s)
        self.noise_net_.backward(cache, dz, grads["noise"])

    # -- step distributions -------------------------------------------

    def sde_step_params(self, obs, A, tau, delta: float | None = None):
        delta = self.config.delta if delta is None else delta
        v, _ = self.velocity(obs, A, tau)
        return sde_step_moments(A, v, tau, delta, self.noise_level)

    def noise_step_params(self, obs, A, tau, delta: float | None = None):
        delta = self.config.delta if delta is None else delta
        v, _ = self.velocity(obs, A, tau)
        sigma, _ = self.noise_std(obs, A, tau)
        return A + v * delta, sigma

    def step_terms(self, obs, A, A_next, tau, kind: str, grads=None, want_entropy=False) -> StepTerms:
        """Log-density of ``A_next`` given ``A`` for each row, recomputed from
        the current parameters.  ``kind`` is ``"learned"`` or ``"sde"``; ``tau``
        may vary per row.  Rows whose SDE std is zero contribute 0."""
        delta = self.config.delta
        tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (A.shape[0],))
        v, vcache = self.velocity(obs, A, tau)
        D = A.shape[1]
        if kind == "learned":
            sigma, naux = self.noise_std(obs, A, tau)
            r = A_next - (A + v * delta)
            logp = (-0.5 * LOG_2PI - np.log(sigma) - 0.5 * (r / sigma) ** 2).sum(axis=1)
            ent = gaussian_entropy(sigma).mean(axis=1) if want_entropy else None

            def backward(d_logp, d_ent=None):
                d = d_logp[:, None]
                gv = d * r / sigma**2 * delta
                gs = d * (-1.0 / sigma + r**2 / sigma**3)
                if d_ent is not None:
                    gs = gs + d_ent[:, None] / (D * sigma)
                self._velocity_backward(vcache, gv, grads)
                self._noise_backward(naux, gs, grads)

            return StepTerms(logp, ent, backward)

        if kind != "sde":
            raise ValueError(f"unknown step kind {kind!r}")
        mean, std = sde_step_moments(A, v, tau, delta, self.noise_level)
        std = np.broadcast_to(std, tau.shape)
        live = std > 0.0
        safe = np.where(live, std, 1.0)[:, None]
        r = A_next - mean
        logp = np.where(live, (-0.5 * LOG_2PI - np.log(safe) - 0.5 * (r / safe) ** 2).sum(axis=1), 0.0)
        ent = np.where(live, gaussian_entropy(safe[:, 0]), 0.0) if want_entropy else None
        dmean_dv = (1.0 + sde_drift_gain(tau, self.noise_level) * tau) * delta

        def backward(d_logp, d_ent=None):
            d = np.where(live, d_logp, 0.0)[:, None]
            gv = d * r / safe**2 * dmean_dv[:, None]
            self._velocity_backward(vcache, gv, grads)

        return StepTerms(logp, ent, backward)

    # -- sampling -------------------------------------------------------

    def sample_ode(self, obs, A0) -> np.ndarray:
        """K explicit Euler steps of the learned field from ``A0`` (flattened)."""
        A = np.array(A0, dtype=np.float64)
        delta = self.config.delta
        for tau in self.config.taus[:-1]:
            v, _ = self.velocity(obs, A, tau)
            A = A + v * delta
        return A

    def sample_trace(self, obs, mode: str, rng: np.random.Generator, k_star=None, A0=None) -> DenoisingTrace:
        """Draw one denoising chain per observation row.

        Every mode consumes the generator identically (step index, prior
        draw, one standard-normal block per step), so traces from different
        modes under one seed share their randomness.
        """
        if mode not in TRACE_MODES:
            raise ValueError(f"mode must be one of {TRACE_MODES}, got {mode!r}")
        obs = np.asarray(obs, dtype=np.float64)
        n, D, K = obs.shape[0], self.flat_dim, self.denoise_steps
        delta = self.config.delta
        drawn_k = rng.integers(0, K, size=n)
        if k_star is not None:
            drawn_k = np.broadcast_to(np.asarray(k_star, dtype=np.int64), (n,)).copy()
            if np.any(drawn_k < 0) or np.any(drawn_k >= K):
                raise ValueError(f"hybrid step index must lie in [0, {K}), got {k_star!r}")
        prior_draw = rng.standard_normal((n, D))
        A = prior_draw if A0 is None else np.array(A0, dtype=np.float64).reshape(n, D)
        states = np.empty((K + 1, n, D))
        means = np.empty((K, n, D))
        stds = np.zeros((K, n, D))
        logps = np.zeros((K, n))
        stoch = np.zeros((K, n), dtype=bool)
        states[0] = A
        hybrid = mode in ("sde_hybrid", "learned_hybrid")
        learned = mode in ("learned_noise", "learned_hybrid")
        for k in range(K):
            tau = k * delta
            xi = rng.standard_normal((n, D))
            v, _ = self.velocity(obs, A, tau)
            if mode == "ode":
                active = np.zeros(n, dtype=bool)
            elif hybrid:
                active = drawn_k == k
            else:
                active = np.ones(n, dtype=bool)
            if learned:
                mean_s = A + v * delta
                sig_s, _ = self.noise_std(obs, A, tau)
            else:
                mean_s, s = sde_step_moments(A, v, tau, delta, self.noise_level)
                sig_s = np.full((n, D), float(s))
            mean = np.where(active[:, None], mean_s, A + v * delta)
            sig = np.where(active[:, None], sig_s, 0.0)
            A_next = mean + sig * xi
            live = active & (sig.max(axis=1) > 0.0)
            means[k], stds[k], stoch[k] = mean, sig, live
            if live.any():
                logps[k, live] = gaussian_log_prob(A_next[live], mean[live], sig[live])
            A = A_next
            states[k + 1] = A
        prior = gaussian_log_prob(states[0], 0.0, 1.0)
        return DenoisingTrace(
            states, means, stds, logps, stoch, np.asarray(prior, dtype=np.float64).reshape(n),
            mode, drawn_k if hybrid else None,
        )

    def joint_log_prob(self, obs, trace: DenoisingTrace, grads=None):
        """Prior plus every transition density of fully stochastic traces,
        recomputed from current parameters.  Returns ``(values, backward)``."""
        if trace.mode not in ("learned_noise", "sde_full"):
            raise ValueError(f"joint log-prob needs a fully stochastic trace, got mode {trace.mode!r}")
        K, n, D = trace.means.shape
        kind = "learned" if trace.mode == "learned_noise" else "sde"
        rows_obs = np.tile(obs, (K, 1))
        taus = np.repeat(np.arange(K) * self.config.delta, n)
        terms = self.step_terms(
            rows_obs, trace.states[:-1].reshape(K * n, D), trace.states[1:].reshape(K * n, D),
            taus, kind, grads,
        )
        values = trace.prior_log_prob + terms.logp.reshape(K, n).sum(axis=0)

        def backward(d_values):
            terms.backward(np.tile(np.asarray(d_values, dtype=np.float64), K))

        return values, backward

    def entropy_bonus(self, obs, trace: DenoisingTrace, grads=None):
        """Mean Gaussian differential entropy over stochastic steps and dims."""
        K, n, D = trace.means.shape
        rows_obs = np.tile(obs, (K, 1))
        taus = np.repeat(np.arange(K) * self.config.delta, n)
        sigma, aux = self.noise_std(rows_obs, trace.states[:-1].reshape(K * n, D), taus)
        value = float(gaussian_entropy(sigma).mean())

        def backward(d_value):
            self._noise_backward(aux, np.full_like(sigma, d_value / (sigma.size)) / sigma, grads)

        return value, backward

    # -- supervised flow matching --------------------------------------

    def cfm_loss(self, obs, chunks, rng: np.random.Generator, grads=None) -> float:
        """Mean over the batch of ``|v(A_tau, obs, tau) - (A - eps)|^2``.

        Gradients go to the velocity network only (when ``grads`` is given).
        """
        A = np.asarray(chunks, dtype=np.float64).reshape(len(obs), -1)
        n = A.shape[0]
        tau = rng.uniform(0.0, 1.0, size=n)
        eps = rng.standard_normal(A.shape)
        A_tau = tau[:, None] * A + (1.0 - tau[:, None]) * eps
        target = A - eps
        v, cache = self.velocity(obs, A_tau, tau)
        diff = v - target
        loss = float((diff**2).sum(axis=1).mean())
        if grads is not None:
            self._velocity_backward(cache, 2.0 * diff / n, grads)
        return loss

    def fit(self, X, y, warm_start: bool = False):
        X = check_obs(X)
        y = check_chunks(y, len(X), self.chunk_size, self.action_dim)
        if not (warm_start and hasattr(self, "velocity_net_")):
            self.initialize(X.shape[1])
        elif X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} observation features, got {X.shape[1]}")
        rng = np.random.default_rng(self.random_state)
        # Loss on one fixed draw of (tau, eps), so epochs compare like for like.
        probe_seed = np.random.SeedSequence([0 if self.random_state is None else self.random_state, 11])
        opt = Adam([self.velocity_net_], lr=self.learning_rate)
        grads = {"velocity": self.velocity_net_.new_grads()}
        n = len(X)
        bs = min(self.batch_size, n)
        for _ in range(self.n_epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, bs):
                idx = order[start : start + bs]
                grads["velocity"].zero()
                total += self.cfm_loss(X[idx], y[idx], rng, grads) * len(idx)
                opt.step([grads["velocity"]])
            self.loss_curve_.append(total / n)
            self.probe_loss_curve_.append(self.cfm_loss(X, y, np.random.default_rng(probe_seed)))
        return self

    def predict(self, X, noise=None) -> np.ndarray:
        """Deterministic ODE chunks ``(n, H, d_action)``.

        ``noise`` is the initial state; by default it is drawn from
        ``random_state`` so repeated calls agree.
        """
        check_is_fitted(self)
        X = check_obs(X, self.n_features_in_)
        if noise is None:
            noise = np.random.default_rng(self.random_state).standard_normal((len(X), self.flat_dim))
        out = self.sample_ode(X, np.asarray(noise, dtype=np.float64).reshape(len(X), self.flat_dim))
        return out.reshape(len(X), self.chunk_size, self.action_dim)

    def sample(self, X, mode: str = "sde_hybrid", random_state=None) -> DenoisingTrace:
        check_is_fitted(self)
        X = check_obs(X, self.n_features_in_)
        rng = random_state if isinstance(random_state, np.random.Generator) else np.random.default_rng(random_state)
        return self.sample_trace(X, mode, rng)
