"""Dense float64 networks with hand-written reverse-mode gradients.

Everything here operates on row-major numpy arrays: a batch of inputs is an
``(n, d_in)`` array, weights are ``(d_out, d_in)``.  Gradients are accumulated
into a :class:`GradStore` that mirrors the owning :class:`Mlp` and is only
ever written by one caller at a time; batch reductions are plain ``X.T @ G``
sums so the reduction order is fixed by numpy's row order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import BinaryIO, Callable, Sequence

import numpy as np
from scipy.special import expit

ACTIVATIONS = ("silu", "tanh")

CHECKPOINT_MAGIC = b"FLOWRLCK"
CHECKPOINT_VERSION = 1


class StaleCacheError(RuntimeError):
    pass


sigmoid = expit


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "silu":
        return z * sigmoid(z)
    return np.tanh(z)


def _act_grad(name: str, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    if name == "silu":
        s = sigmoid(z)
        return s * (1.0 + z * (1.0 - s))
    return 1.0 - h * h


@dataclass
class MlpCache:
    inputs: list  # input to each linear layer
    pre: list  # pre-activations of hidden layers
    version: int
    squeeze: bool


class Mlp:
    """Fully connected network, activation on hidden layers only.

    ``layer_sizes`` lists every width including input and output, so a
    2-3-1 net has one hidden layer of width 3.
    """

    def __init__(
        self,
        layer_sizes: Sequence[int],
        activation: str = "silu",
        rng: np.random.Generator | None = None,
        final_scale: float = 1.0,
    ):
        if len(layer_sizes) < 2 or any(int(s) < 1 for s in layer_sizes):
            raise ValueError(f"invalid layer_sizes {layer_sizes!r}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
        self.layer_sizes = [int(s) for s in layer_sizes]
        self.activation = activation
        self.version = 0
        rng = np.random.default_rng(0) if rng is None else rng
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        n_layers = len(self.layer_sizes) - 1
        for i in range(n_layers):
            fan_in, fan_out = self.layer_sizes[i], self.layer_sizes[i + 1]
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            if i == n_layers - 1:
                w *= final_scale
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    @property
    def params(self) -> list[np.ndarray]:
        """Parameter arrays in declaration order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def n_params(self) -> int:
        return sum(
            self.layer_sizes[i + 1] * (self.layer_sizes[i] + 1)
            for i in range(len(self.layer_sizes) - 1)
        )

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def new_grads(self) -> "GradStore":
        return GradStore([np.zeros_like(p) for p in self.params])

    def mark_updated(self) -> None:
        self.version += 1

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"expected input width {self.n_in}, got shape {x.shape}")
        inputs, pre = [], []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w.T + b
            if i < last:
                pre.append(z)
                h = _act(self.activation, z)
            else:
                h = z
        out = h[0] if squeeze else h
        return out, MlpCache(inputs, pre, self.version, squeeze)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(
        self, cache: MlpCache, grad_out: np.ndarray, grads: "GradStore"
    ) -> np.ndarray:
        """Accumulate d(loss)/d(params) into ``grads``; return d(loss)/d(input)."""
        if cache.version != self.version:
            raise StaleCacheError(
                f"cache from parameter version {cache.version}, network is at {self.version}"
            )
        g = np.asarray(grad_out, dtype=np.float64)
        if cache.squeeze:
            g = g[None, :]
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                z = cache.pre[i]
                h = cache.inputs[i + 1]
                g = g * _act_grad(self.activation, z, h)
            grads.arrays[2 * i] += g.T @ cache.inputs[i]
            grads.arrays[2 * i + 1] += g.sum(axis=0)
            g = g @ self.weights[i]
        grads.count += 1
        return g[0] if cache.squeeze else g

    def copy(self) -> "Mlp":
        other = Mlp.__new__(Mlp)
        other.layer_sizes = list(self.layer_sizes)
        other.activation = self.activation
        other.version = 0
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    def spec(self) -> dict:
        return {"layer_sizes": self.layer_sizes, "activation": self.activation}


def mlp_forward(params: Mlp, x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    return params.forward(x)


def mlp_backward(params: Mlp, cache: MlpCache, output_grad: np.ndarray, grads: "GradStore") -> np.ndarray:
    return params.backward(cache, output_grad, grads)


@dataclass
class GradStore:
    arrays: list[np.ndarray]
    count: int = 0

    def zero(self) -> None:
        for a in self.arrays:
            a.fill(0.0)
        self.count = 0

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays])


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 3e-4

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float = 3e-4, **kw) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            lr=lr,
            **kw,
        )


def adam_step(
    params: Sequence[np.ndarray],
    grads: GradStore,
    state: AdamState,
    lr: float | None = None,
    max_grad_norm: float | None = None,
) -> None:
    """In-place bias-corrected Adam update.  Gradients are left for the caller to zero."""
    lr = state.lr if lr is None else lr
    scale = 1.0
    if max_grad_norm is not None:
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.arrays)))
        if norm > max_grad_norm:
            scale = max_grad_norm / (norm + 1e-12)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads.arrays, state.m, state.v):
        g = g * scale
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Adam over a group of networks, bumping their versions on every step."""

    def __init__(self, nets: Sequence[Mlp], lr: float, max_grad_norm: float | None = None):
        self.nets = list(nets)
        self.lr = lr
        self.max_grad_norm = max_grad_norm
        self.state = AdamState.for_params(self.params, lr=lr)

    @property
    def params(self) -> list[np.ndarray]:
        return [p for net in self.nets for p in net.params]

    def step(self, grads: Sequence[GradStore], lr: float | None = None) -> None:
        merged = GradStore([a for g in grads for a in g.arrays])
        adam_step(self.params, merged, self.state, lr=self.lr if lr is None else lr,
                  max_grad_norm=self.max_grad_norm)
        for net in self.nets:
            net.mark_updated()


def finite_diff_gradcheck(
    loss_fn: Callable[[], tuple[float, Sequence[np.ndarray]]],
    params: Sequence[np.ndarray],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max over coordinates of |analytic - central| / max(1, |central|).

    ``loss_fn`` returns ``(loss, grads)`` with grads aligned to ``params``;
    it must rebuild any randomness from a fixed seed on every call.
    ``max_coords`` checks a random subset of coordinates per array.
    """
    loss0, analytic = loss_fn()
    loss1, analytic1 = loss_fn()
    if loss0 != loss1 or any(not np.array_equal(a, b) for a, b in zip(analytic, analytic1)):
        raise RuntimeError("loss_fn is not deterministic under a fixed seed")
    analytic = [np.array(a, copy=True) for a in analytic]
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        gflat = g.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()[0]
            flat[i] = orig - h
            lm = loss_fn()[0]
            flat[i] = orig
            num = (lp - lm) / (2.0 * h)
            err = abs(gflat[i] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    return worst


# Checkpoint layout (all integers little-endian):
#   8 bytes   magic b"FLOWRLCK"
#   u32       format version
#   u32       header length L
#   L bytes   UTF-8 JSON header: {"meta": {...}, "nets": [{"name", "layer_sizes", "activation"}]}
#   then for each net in header order, for each layer: weight (row-major) then bias,
#   as little-endian float64.


def write_checkpoint(fh: BinaryIO, nets: dict[str, Mlp], meta: dict | None = None) -> None:
    header = {
        "meta": meta or {},
        "nets": [{"name": name, **net.spec()} for name, net in nets.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
    fh.write(blob)
    for net in nets.values():
        for p in net.params:
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def read_checkpoint(fh: BinaryIO) -> tuple[dict[str, Mlp], dict]:
    magic = fh.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise ValueError("not a flowrl checkpoint (bad magic)")
    version, n = struct.unpack("<II", fh.read(8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(fh.read(n).decode("utf-8"))
    nets: dict[str, Mlp] = {}
    for entry in header["nets"]:
        net = Mlp(entry["layer_sizes"], entry["activation"])
        for p in net.params:
            raw = fh.read(p.size * 8)
            if len(raw) != p.size * 8:
                raise ValueError(f"truncated checkpoint while reading {entry['name']!r}")
            p[...] = np.frombuffer(raw, dtype="<f8").reshape(p.shape)
        nets[entry["name"]] = net
    return nets, header["meta"]
