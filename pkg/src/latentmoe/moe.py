"""Reference routed feed-forward layer (standard MoE).

Experts are gated FFNs ``down((up x) * act(gate x))``; a linear router picks
the ``top_k`` experts by softmax probability and renormalizes their gates. The
layer output keeps the residual path: ``y = x + sum_j g_j E_j(x)``.

Expert ids are 0-based everywhere in the Python API.

Forward kernels use ``np.einsum`` rather than BLAS matmul because BLAS does not
give the same bits for a row computed alone and the same row inside a batch.
Backward passes use plain matmul; gradients carry no bit-exactness contract.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.special import expit

from .errors import ArgumentError, StateError

OPERATORS = ("up", "gate", "down")


def _silu(z):
    return z * expit(z)


def _silu_grad(z):
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z):
    return (z > 0.0).astype(np.float64)


ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "silu": (_silu, _silu_grad),
    "identity": (lambda z: z, np.ones_like),
    "relu": (_relu, _relu_grad),
}


def activation(name: str) -> tuple[Callable, Callable]:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ArgumentError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


def apply_linear(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Rows of ``x`` mapped through ``w`` (i.e. ``x @ w.T``), row-independent bits."""
    return np.einsum("tn,mn->tm", x, w)


@dataclass(frozen=True)
class MoeConfig:
    n: int
    m: int
    num_experts: int
    top_k: int
    activation: str = "silu"

    def __post_init__(self):
        for name in ("n", "m", "num_experts", "top_k"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
                raise ArgumentError(f"{name} must be a positive integer, got {v!r}")
        if self.top_k > self.num_experts:
            raise ArgumentError(f"top_k={self.top_k} exceeds num_experts={self.num_experts}")
        activation(self.activation)


def _check_shape(name: str, a: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.shape != shape:
        raise ArgumentError(f"{name} has shape {a.shape}, expected {shape}")
    return a


@dataclass(frozen=True)
class ExpertWeights:
    w_up: np.ndarray  # m x n
    w_gate: np.ndarray  # m x n
    w_down: np.ndarray  # n x m

    @property
    def dims(self) -> tuple[int, int]:
        m, n = np.shape(self.w_up)
        return n, m

    def validate(self, n: int | None = None, m: int | None = None) -> None:
        if n is None or m is None:
            n, m = self.dims
        _check_shape("w_up", self.w_up, (m, n))
        _check_shape("w_gate", self.w_gate, (m, n))
        _check_shape("w_down", self.w_down, (n, m))


@dataclass(frozen=True)
class RouterWeights:
    w_router: np.ndarray  # N x n


@dataclass(frozen=True)
class RouteDecision:
    """Routing for a batch: ``indices``/``gates`` are (T, top_k), ``probs`` is (T, N)."""

    indices: np.ndarray
    gates: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


def _as_batch(x, n: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != n:
        raise ArgumentError(f"input must have trailing dimension {n}, got shape {x.shape}")
    return x, single


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def route_batch(w_router: np.ndarray, x: np.ndarray, top_k: int) -> RouteDecision:
    logits = apply_linear(w_router, x)
    probs = _softmax(logits)
    # stable sort on -logits: ties resolve to the lower expert index
    indices = np.argsort(-logits, axis=1, kind="stable")[:, :top_k]
    gates = _softmax(np.take_along_axis(logits, indices, axis=1))
    return RouteDecision(indices, gates, logits, probs)


def expert_forward(e: ExpertWeights, x, act: str = "silu") -> np.ndarray:
    """``W_down((W_up x) * act(W_gate x))`` for a vector or a (T, n) batch."""
    n, m = e.dims
    e.validate(n, m)
    xb, single = _as_batch(x, n)
    f, _ = activation(act)
    h = apply_linear(e.w_up, xb) * f(apply_linear(e.w_gate, xb))
    out = apply_linear(e.w_down, h)
    return out[0] if single else out


# A chain is the sequence of matrices an operator applies, first to last:
# dense -> [W]; latent up/gate -> [B, A]; latent down -> [A, B].
Chain = list[tuple[str, np.ndarray]]


def _chain_forward(chain: Chain, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    inputs = []
    for _, w in chain:
        inputs.append(x)
        x = apply_linear(w, x)
    return x, inputs


def _chain_backward(chain: Chain, inputs: list[np.ndarray], dy: np.ndarray, grads: dict) -> np.ndarray:
    for (name, w), x in zip(reversed(chain), reversed(inputs)):
        grads[name] += dy.T @ x
        dy = dy @ w
    return dy


@dataclass
class ForwardCache:
    x: np.ndarray
    decision: RouteDecision
    y: np.ndarray
    experts: dict = field(default_factory=dict)
    single: bool = False


class RoutedFFN:
    """Shared routing / mixing / backward machinery for MoE and MoLAE layers.

    Subclasses provide ``_chains(i)`` (matrices for the up, gate and down
    operators of expert ``i``) and ``parameters()``.
    """

    config: MoeConfig
    router: RouterWeights

    def _chains(self, i: int) -> tuple[Chain, Chain, Chain]:
        raise NotImplementedError

    def parameters(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def with_parameters(self, params: Mapping[str, np.ndarray]) -> "RoutedFFN":
        raise NotImplementedError

    # --- forward -----------------------------------------------------------

    def route(self, x) -> RouteDecision:
        xb, single = _as_batch(x, self.config.n)
        d = route_batch(self.router.w_router, xb, self.config.top_k)
        if single:
            return RouteDecision(d.indices[0], d.gates[0], d.logits[0], d.probs[0])
        return d

    def expert(self, i: int, x) -> np.ndarray:
        """Output of expert ``i`` alone (no gate, no residual)."""
        if not 0 <= i < self.config.num_experts:
            raise ArgumentError(f"expert index {i} out of range [0, {self.config.num_experts})")
        xb, single = _as_batch(x, self.config.n)
        out = self._expert_eval(i, xb)[0]
        return out[0] if single else out

    def _expert_eval(self, i: int, x: np.ndarray):
        up, gate, down = self._chains(i)
        f, _ = activation(self.config.activation)
        u, up_in = _chain_forward(up, x)
        a, gate_in = _chain_forward(gate, x)
        h = u * f(a)
        out, down_in = _chain_forward(down, h)
        return out, (u, a, up_in, gate_in, down_in)

    def forward(self, x, return_cache: bool = False):
        xb, single = _as_batch(x, self.config.n)
        d = route_batch(self.router.w_router, xb, self.config.top_k)
        acc = np.zeros_like(xb)
        cache = ForwardCache(xb, d, acc, single=single)
        for i in range(self.config.num_experts):
            rows, slots = np.nonzero(d.indices == i)
            if rows.size == 0:
                continue  # unselected experts do no work
            out, inter = self._expert_eval(i, xb[rows])
            acc[rows] += d.gates[rows, slots][:, None] * out
            if return_cache:
                cache.experts[i] = (rows, slots, out, inter)
        y = xb + acc
        cache.y = y
        y_out = y[0] if single else y
        return (y_out, cache) if return_cache else y_out

    def forward_dense(self, x) -> np.ndarray:
        """Sum over all N experts with unselected gates set to zero (test oracle path)."""
        xb, single = _as_batch(x, self.config.n)
        d = route_batch(self.router.w_router, xb, self.config.top_k)
        g = np.zeros((xb.shape[0], self.config.num_experts))
        np.put_along_axis(g, d.indices, d.gates, axis=1)
        y = xb.copy()
        for i in range(self.config.num_experts):
            y = y + g[:, i : i + 1] * self._expert_eval(i, xb)[0]
        return y[0] if single else y

    # --- backward ----------------------------------------------------------

    def backward(self, cache: ForwardCache | None, dy) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Gradients of ``<dy, y>`` w.r.t. the input and every parameter.

        Expert selection is held fixed; the renormalized gate values are
        differentiated through the softmax over the selected logits.
        """
        if cache is None:
            raise StateError("backward needs the cache from forward(x, return_cache=True)")
        dy = np.asarray(dy, dtype=np.float64)
        if cache.single:
            dy = dy[None, :]
        if dy.shape != cache.x.shape:
            raise ArgumentError(f"dy has shape {dy.shape}, expected {cache.x.shape}")
        f, f_grad = activation(self.config.activation)
        grads = {k: np.zeros_like(v) for k, v in self.parameters().items()}
        x, d = cache.x, cache.decision
        dx = dy.copy()
        dgates = np.zeros_like(d.gates)
        for i, (rows, slots, out, inter) in cache.experts.items():
            u, a, up_in, gate_in, down_in = inter
            up, gate, down = self._chains(i)
            g = d.gates[rows, slots][:, None]
            dyr = dy[rows]
            dgates[rows, slots] = np.einsum("tn,tn->t", dyr, out)
            dh = _chain_backward(down, down_in, g * dyr, grads)
            du = dh * f(a)
            da = dh * u * f_grad(a)
            dx[rows] += _chain_backward(up, up_in, du, grads)
            dx[rows] += _chain_backward(gate, gate_in, da, grads)
        dsel = d.gates * (dgates - np.sum(d.gates * dgates, axis=1, keepdims=True))
        dlogits = np.zeros((x.shape[0], self.config.num_experts))
        np.put_along_axis(dlogits, d.indices, dsel, axis=1)
        grads["router"] += dlogits.T @ x
        dx += dlogits @ self.router.w_router
        return (dx[0] if cache.single else dx), grads


class MoeLayer(RoutedFFN):
    def __init__(self, config: MoeConfig, experts: Iterable[ExpertWeights], router: RouterWeights):
        self.config = config
        self.experts = tuple(experts)
        self.router = RouterWeights(_check_shape("w_router", router.w_router, (config.num_experts, config.n)))
        if len(self.experts) != config.num_experts:
            raise ArgumentError(f"got {len(self.experts)} experts, config says {config.num_experts}")
        for e in self.experts:
            e.validate(config.n, config.m)

    kind = "moe"

    def _chains(self, i):
        e = self.experts[i]
        return (
            [(f"experts.{i}.up", e.w_up)],
            [(f"experts.{i}.gate", e.w_gate)],
            [(f"experts.{i}.down", e.w_down)],
        )

    def operator(self, i: int, which: str) -> np.ndarray:
        return getattr(self.experts[i], f"w_{which}")

    def parameters(self) -> dict[str, np.ndarray]:
        p = {"router": self.router.w_router}
        for i, e in enumerate(self.experts):
            p[f"experts.{i}.up"] = e.w_up
            p[f"experts.{i}.gate"] = e.w_gate
            p[f"experts.{i}.down"] = e.w_down
        return p

    @classmethod
    def from_parameters(cls, config: MoeConfig, params: Mapping[str, np.ndarray]) -> "MoeLayer":
        experts = [
            ExpertWeights(params[f"experts.{i}.up"], params[f"experts.{i}.gate"], params[f"experts.{i}.down"])
            for i in range(config.num_experts)
        ]
        return cls(config, experts, RouterWeights(params["router"]))

    def with_parameters(self, params) -> "MoeLayer":
        return MoeLayer.from_parameters(self.config, params)


def route(layer: RoutedFFN, x) -> RouteDecision:
    return layer.route(x)


def ffn_forward(layer: RoutedFFN, x, return_cache: bool = False):
    return layer.forward(x, return_cache=return_cache)


def ffn_backward(layer: RoutedFFN, cache: ForwardCache | None, dy):
    return layer.backward(cache, dy)


def route_stats(layer: RoutedFFN, x) -> tuple[np.ndarray, np.ndarray]:
    """Per-expert selection frequency ``f`` and mean router probability ``P`` over a batch."""
    xb, _ = _as_batch(x, layer.config.n)
    if xb.shape[0] == 0:
        raise ArgumentError("route_stats needs a non-empty batch")
    d = route_batch(layer.router.w_router, xb, layer.config.top_k)
    counts = np.bincount(d.indices.ravel(), minlength=layer.config.num_experts)
    return counts / d.indices.size, d.probs.mean(axis=0)


def aux_load_balance_loss(freqs, mean_probs) -> float:
    """``N * sum_i f_i P_i``; equals 1 under perfectly uniform routing."""
    f = np.asarray(freqs, dtype=np.float64).ravel()
    p = np.asarray(mean_probs, dtype=np.float64).ravel()
    if f.size == 0 or p.size == 0:
        raise ArgumentError("load-balance loss needs statistics from a non-empty batch")
    if f.shape != p.shape:
        raise ArgumentError(f"frequency and probability vectors differ in length: {f.size} vs {p.size}")
    return float(f.size * np.dot(f, p))
