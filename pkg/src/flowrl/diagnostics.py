"""Self-checks: ODE/SDE marginal agreement, gradient checks, identity sweeps."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .algo import Critic, CriticConfig, PpoConfig, gae, ppo_loss
from .envs import EnvBatch, TaskSpec
from .nn import finite_diff_gradcheck
from .policy import FlowPolicy, noise_schedule, sde_drift_gain, sde_step_moments
from .rollout import collect, flatten_for_update

GRADCHECK_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def gaussian_velocity(x, tau, mu: float, sd: float):
    """``E[X - eps | tau X + (1 - tau) eps = x]`` for ``X ~ N(mu, sd^2)``, ``eps ~ N(0, 1)``."""
    x = np.asarray(x, dtype=np.float64)
    var = tau * tau * sd * sd + (1.0 - tau) ** 2
    cov = tau * sd * sd - (1.0 - tau)
    return mu + cov * (x - tau * mu) / var


def transport(n: int, K: int, a: float, mu: float, sd: float, seed: int, stochastic: bool):
    """Integrate the analytic 1-D field with Euler (ODE) or Euler-Maruyama (SDE).

    Both variants draw the same prior and per-step normals, so ``a = 0``
    reproduces the ODE path exactly.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    delta = 1.0 / K
    for k in range(K):
        tau = k * delta
        xi = rng.standard_normal(n)
        v = gaussian_velocity(x, tau, mu, sd)
        if stochastic:
            mean, std = sde_step_moments(x, v, tau, delta, a)
            x = mean + std * xi
        else:
            x = x + v * delta
    return x


def marginal_check(a: float = 0.5, K: int = 64, n: int = 100_000, mu: float = 1.0, sd: float = 2.0,
                   seed: int = 0) -> dict:
    ode = transport(n, K, a, mu, sd, seed, stochastic=False)
    sde = transport(n, K, a, mu, sd, seed, stochastic=True)
    se = math.sqrt(sde.var() / n + ode.var() / n)
    return {
        "ode_mean": float(ode.mean()), "sde_mean": float(sde.mean()),
        "ode_var": float(ode.var()), "sde_var": float(sde.var()),
        "mean_gap": float(abs(sde.mean() - ode.mean())), "standard_error": se,
        "variance_ratio": float(sde.var() / ode.var()),
        "max_abs_diff": float(np.max(np.abs(sde - ode))),
    }


def marginal_checks(seed: int = 0, n: int = 100_000, K: int = 64) -> list[CheckResult]:
    out = []
    m = marginal_check(0.5, K, n, seed=seed)
    ok = m["mean_gap"] <= 3 * m["standard_error"] and 0.97 <= m["variance_ratio"] <= 1.03
    out.append(CheckResult(
        "marginal a=0.5", ok,
        f"mean gap {m['mean_gap']:.4g} (3 SE = {3 * m['standard_error']:.4g}), variance ratio {m['variance_ratio']:.4f}",
    ))
    z = marginal_check(0.0, K, n, seed=seed)
    out.append(CheckResult("marginal a=0", z["max_abs_diff"] == 0.0, f"max |SDE - ODE| = {z['max_abs_diff']:.3g}"))
    return out


def _small_setup(seed: int, learned: bool):
    spec = TaskSpec(task_id=0)
    policy = FlowPolicy(hidden_sizes=(16, 16), random_state=seed).initialize(spec.d_obs)
    rng = np.random.default_rng(seed)
    for net in policy.nets.values():
        for p in net.params:
            p += 0.3 * rng.standard_normal(p.shape)
    return spec, policy


def _grads_list(policy, store, names):
    return [a for name in names for a in store[name].arrays]


def _params_list(policy, names):
    return [p for name in names for p in policy.nets[name].params]


def gradcheck_cfm(seed: int = 0, max_coords: int = 20) -> float:
    spec, policy = _small_setup(seed, False)
    data = np.random.default_rng(seed + 1)
    obs = data.uniform(size=(6, spec.d_obs))
    chunks = data.standard_normal((6, policy.flat_dim))

    def fn():
        grads = policy.new_grads()
        loss = policy.cfm_loss(obs, chunks, np.random.default_rng(seed), grads)
        return loss, _grads_list(policy, grads, ["velocity"])

    return finite_diff_gradcheck(fn, _params_list(policy, ["velocity"]), max_coords=max_coords)


def gradcheck_joint_log_prob(seed: int = 0, mode: str = "learned_noise", max_coords: int = 20) -> float:
    spec, policy = _small_setup(seed, mode == "learned_noise")
    obs = np.random.default_rng(seed + 1).uniform(size=(5, spec.d_obs))
    trace = policy.sample_trace(obs, mode, np.random.default_rng(seed + 2))
    names = ["velocity", "noise"] if mode == "learned_noise" else ["velocity"]
    weights = np.random.default_rng(seed + 3).standard_normal(len(obs))

    def fn():
        grads = policy.new_grads()
        values, backward = policy.joint_log_prob(obs, trace, grads)
        backward(weights)
        return float(weights @ values), _grads_list(policy, grads, names)

    return finite_diff_gradcheck(fn, _params_list(policy, names), max_coords=max_coords)


def gradcheck_ppo_loss(seed: int = 0, mdp: str = "one_layer", noise: str = "learned",
                       placement: str = "obs_head", max_coords: int = 15) -> float:
    """Gradient of the full PPO loss (surrogate, value and entropy terms)
    after nudging the policy away from the behaviour parameters."""
    spec, policy = _small_setup(seed, noise == "learned")
    critic = Critic(CriticConfig(placement, "mlp1", 16), spec.d_obs, policy.flat_dim, policy.time_feature_dim,
                    rng=np.random.default_rng(seed + 4))
    envs = EnvBatch(spec, 6, seed)
    buf, _ = collect(policy, envs, 3, mdp, noise, np.random.default_rng(seed + 5), critic)
    values = np.concatenate([buf.values, buf.bootstrap[None]])
    buf.advantages, buf.returns = gae(buf.rewards, values, buf.dones, 0.99, 0.95)
    batch = flatten_for_update(buf, noise, policy.config.delta)
    batch.advantages = np.random.default_rng(seed + 6).standard_normal(len(batch))
    rng = np.random.default_rng(seed + 7)
    for net in policy.nets.values():
        for p in net.params:
            p += 0.01 * rng.standard_normal(p.shape)
    # A wide clip keeps every sample away from the kink of the clipped objective.
    cfg = PpoConfig(clip_ratio=10.0, entropy_coef=0.1)
    names = ["velocity", "noise"] if noise == "learned" else ["velocity"]
    samples = np.arange(len(batch))

    def fn():
        pg, cg = policy.new_grads(), critic.new_grads()
        loss, _, _ = ppo_loss(policy, critic, batch, samples, cfg, pg, cg, use_entropy=noise == "learned")
        return loss, _grads_list(policy, pg, names) + list(cg.arrays)

    params = _params_list(policy, names) + critic.net.params
    return finite_diff_gradcheck(fn, params, max_coords=max_coords)


def gradient_checks(seed: int = 0) -> list[CheckResult]:
    cases = [
        ("gradcheck cfm_loss", lambda: gradcheck_cfm(seed)),
        ("gradcheck joint_log_prob learned noise", lambda: gradcheck_joint_log_prob(seed, "learned_noise")),
        ("gradcheck joint_log_prob sde", lambda: gradcheck_joint_log_prob(seed, "sde_full")),
        ("gradcheck ppo_loss one_layer", lambda: gradcheck_ppo_loss(seed, "one_layer", "learned")),
        ("gradcheck ppo_loss two_layer_full", lambda: gradcheck_ppo_loss(seed, "two_layer_full", "sde")),
        ("gradcheck ppo_loss hybrid expert_head",
         lambda: gradcheck_ppo_loss(seed, "two_layer_hybrid", "sde", "expert_head")),
    ]
    out = []
    for name, run in cases:
        err = run()
        out.append(CheckResult(name, err <= GRADCHECK_TOL, f"max relative error {err:.3g}"))
    return out


def identity_checks(seed: int = 0, n: int = 1000) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    tau = rng.uniform(0.0, 0.99, n)
    a = rng.uniform(0.0, 1.0, n)
    sig = noise_schedule(tau, 1.0) * a
    gain_err = float(np.max(np.abs(sde_drift_gain(tau, 1.0) * a * a - sig**2 / (2.0 * (1.0 - tau)))))
    half_err = float(np.max(np.abs(noise_schedule(np.full(n, 0.5), 1.0) * a - a)))
    A = rng.standard_normal(n)
    v = rng.standard_normal(n)
    delta = 0.25
    score = -(A - tau * v) / (1.0 - tau)
    direct = A + (v + 0.5 * sig**2 * score) * delta
    simplified = np.array([sde_step_moments(A[i], v[i], tau[i], delta, a[i])[0] for i in range(n)])
    drift_err = float(np.max(np.abs(direct - simplified)))
    return [
        CheckResult("identity drift gain = sigma^2 / (2 (1 - tau))", gain_err <= 1e-12, f"max error {gain_err:.3g}"),
        CheckResult("identity sigma(0.5) = a", half_err <= 1e-15, f"max error {half_err:.3g}"),
        CheckResult("identity score-form drift = simplified drift", drift_err <= 1e-12, f"max error {drift_err:.3g}"),
    ]


def run_all(seed: int = 0) -> list[CheckResult]:
    return marginal_checks(seed) + gradient_checks(seed) + identity_checks(seed)
