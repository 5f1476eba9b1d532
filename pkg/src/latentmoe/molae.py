"""Mixture-of-latent-experts layer.

Each latent operator of expert ``i`` is a product of a per-expert ``m x m`` map
``A^i`` and a projection ``B`` shared by the group of ``k`` consecutive experts
that ``i`` belongs to::

    up/gate:  W^i = A^i @ B^g      (B^g is m x n)
    down:     W^i = B^g @ A^i      (B^g is n x m, the reverse form)

Operators left out of ``op_mask`` stay dense per expert, which covers the
partial conversions ("gate+down", "up+gate", ...) in one type.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import ArgumentError
from .moe import OPERATORS, MoeConfig, MoeLayer, RoutedFFN, RouterWeights, _check_shape


def parse_op_mask(ops) -> frozenset:
    """Accept ``"up,gate,down"``, ``"all"``, ``"none"``/``""`` or an iterable of names."""
    if isinstance(ops, str):
        s = ops.strip().lower()
        if s in ("all", "full"):
            return frozenset(OPERATORS)
        if s in ("", "none"):
            return frozenset()
        ops = [p.strip() for p in s.split(",") if p.strip()]
    mask = frozenset(ops)
    bad = mask - set(OPERATORS)
    if bad:
        raise ArgumentError(f"unknown operator(s) {sorted(bad)}; valid: {', '.join(OPERATORS)}")
    return mask


def format_op_mask(mask) -> str:
    return ",".join(op for op in OPERATORS if op in mask)


@dataclass(frozen=True)
class MolaeConfig(MoeConfig):
    group_size: int = 1
    op_mask: frozenset = frozenset(OPERATORS)

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "op_mask", parse_op_mask(self.op_mask))
        k = self.group_size
        if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or not 1 <= k <= self.num_experts:
            raise ArgumentError(f"group_size must be in [1, {self.num_experts}], got {k!r}")

    @property
    def num_groups(self) -> int:
        return math.ceil(self.num_experts / self.group_size)

    def base(self) -> MoeConfig:
        return MoeConfig(self.n, self.m, self.num_experts, self.top_k, self.activation)


def group_index(i: int, k: int, num_experts: Optional[int] = None) -> int:
    """Group of 0-based expert ``i`` under contiguous groups of size ``k``."""
    if k < 1:
        raise ArgumentError(f"group size must be positive, got {k}")
    if i < 0 or (num_experts is not None and i >= num_experts):
        raise ArgumentError(f"expert index {i} out of range for {num_experts} experts")
    return i // k


def group_members(g: int, k: int, num_experts: int) -> range:
    return range(g * k, min((g + 1) * k, num_experts))


@dataclass(frozen=True)
class LatentExpert:
    a_up: Optional[np.ndarray] = None
    a_gate: Optional[np.ndarray] = None
    a_down: Optional[np.ndarray] = None


@dataclass(frozen=True)
class LatentGroup:
    b_up: Optional[np.ndarray] = None  # m x n
    b_gate: Optional[np.ndarray] = None  # m x n
    b_down: Optional[np.ndarray] = None  # n x m


def _b_shape(which: str, n: int, m: int) -> tuple[int, int]:
    return (n, m) if which == "down" else (m, n)


def _w_shape(which: str, n: int, m: int) -> tuple[int, int]:
    return (n, m) if which == "down" else (m, n)


class MolaeLayer(RoutedFFN):
    kind = "molae"

    def __init__(
        self,
        config: MolaeConfig,
        groups: Iterable[LatentGroup],
        latent_experts: Iterable[LatentExpert],
        router: RouterWeights,
        dense_experts: Sequence[Mapping[str, np.ndarray]] | None = None,
    ):
        self.config = config
        self.groups = tuple(groups)
        self.latent_experts = tuple(latent_experts)
        n, m, N = config.n, config.m, config.num_experts
        self.router = RouterWeights(_check_shape("w_router", router.w_router, (N, n)))
        if dense_experts is None:
            dense_experts = [{} for _ in range(N)]
        self.dense_experts = tuple(dict(d) for d in dense_experts)
        if len(self.groups) != config.num_groups:
            raise ArgumentError(f"got {len(self.groups)} groups, expected {config.num_groups}")
        if len(self.latent_experts) != N or len(self.dense_experts) != N:
            raise ArgumentError(f"expected {N} latent and dense expert entries")
        mask = config.op_mask
        for which in OPERATORS:
            latent = which in mask
            for g, grp in enumerate(self.groups):
                b = getattr(grp, f"b_{which}")
                if latent != (b is not None):
                    raise ArgumentError(f"group {g}: b_{which} presence does not match op_mask")
                if latent:
                    _check_shape(f"groups[{g}].b_{which}", b, _b_shape(which, n, m))
            for i in range(N):
                a = getattr(self.latent_experts[i], f"a_{which}")
                w = self.dense_experts[i].get(which)
                if latent != (a is not None) or latent == (w is not None):
                    raise ArgumentError(f"expert {i}: operator {which!r} storage does not match op_mask")
                if latent:
                    _check_shape(f"latent[{i}].a_{which}", a, (m, m))
                else:
                    _check_shape(f"dense[{i}].{which}", w, _w_shape(which, n, m))

    def group_of(self, i: int) -> int:
        return group_index(i, self.config.group_size, self.config.num_experts)

    def _chain(self, i: int, which: str):
        if which not in self.config.op_mask:
            return [(f"dense.{i}.{which}", self.dense_experts[i][which])]
        g = self.group_of(i)
        b = (f"groups.{g}.{which}", getattr(self.groups[g], f"b_{which}"))
        a = (f"latent.{i}.{which}", getattr(self.latent_experts[i], f"a_{which}"))
        return [a, b] if which == "down" else [b, a]

    def _chains(self, i):
        return tuple(self._chain(i, w) for w in OPERATORS)

    def operator(self, i: int, which: str) -> np.ndarray:
        """Effective dense matrix of one operator, latent or not."""
        if which in self.config.op_mask:
            return composite_operator(self, i, which)
        return self.dense_experts[i][which]

    def parameters(self) -> dict[str, np.ndarray]:
        p = {"router": self.router.w_router}
        for which in OPERATORS:
            if which in self.config.op_mask:
                for g, grp in enumerate(self.groups):
                    p[f"groups.{g}.{which}"] = getattr(grp, f"b_{which}")
                for i, le in enumerate(self.latent_experts):
                    p[f"latent.{i}.{which}"] = getattr(le, f"a_{which}")
            else:
                for i, d in enumerate(self.dense_experts):
                    p[f"dense.{i}.{which}"] = d[which]
        return p

    @classmethod
    def from_parameters(cls, config: MolaeConfig, params: Mapping[str, np.ndarray]) -> "MolaeLayer":
        mask = config.op_mask
        groups = [
            LatentGroup(**{f"b_{w}": params[f"groups.{g}.{w}"] for w in OPERATORS if w in mask})
            for g in range(config.num_groups)
        ]
        latent = [
            LatentExpert(**{f"a_{w}": params[f"latent.{i}.{w}"] for w in OPERATORS if w in mask})
            for i in range(config.num_experts)
        ]
        dense = [
            {w: params[f"dense.{i}.{w}"] for w in OPERATORS if w not in mask} for i in range(config.num_experts)
        ]
        return cls(config, groups, latent, RouterWeights(params["router"]), dense)

    def with_parameters(self, params) -> "MolaeLayer":
        return MolaeLayer.from_parameters(self.config, params)


def parameter_shapes(config: MolaeConfig) -> dict[str, tuple[int, int]]:
    """Name -> shape of every stored tensor, in storage order."""
    n, m = config.n, config.m
    shapes = {"router": (config.num_experts, n)}
    for w in OPERATORS:
        if w in config.op_mask:
            for g in range(config.num_groups):
                shapes[f"groups.{g}.{w}"] = _b_shape(w, n, m)
            for i in range(config.num_experts):
                shapes[f"latent.{i}.{w}"] = (m, m)
        else:
            for i in range(config.num_experts):
                shapes[f"dense.{i}.{w}"] = _w_shape(w, n, m)
    return shapes


def latent_expert_forward(layer: MolaeLayer, i: int, x) -> np.ndarray:
    return layer.expert(i, x)


def molae_ffn_forward(layer: MolaeLayer, x, return_cache: bool = False):
    return layer.forward(x, return_cache=return_cache)


def molae_ffn_backward(layer: MolaeLayer, cache, dy):
    return layer.backward(cache, dy)


def composite_operator(layer: MolaeLayer, i: int, which: str) -> np.ndarray:
    """``A^i @ B^g`` (up/gate, m x n) or ``B^g @ A^i`` (down, n x m)."""
    if which not in OPERATORS:
        raise ArgumentError(f"unknown operator {which!r}")
    if which not in layer.config.op_mask:
        raise ArgumentError(f"operator {which!r} is not latent in this layer")
    g = layer.group_of(i)
    a = getattr(layer.latent_experts[i], f"a_{which}")
    b = getattr(layer.groups[g], f"b_{which}")
    return b @ a if which == "down" else a @ b


def dense_passthrough(src: MoeLayer, group_size: int = 1) -> MolaeLayer:
    """MolaeLayer with an empty op_mask holding ``src``'s weights unchanged."""
    c = src.config
    cfg = MolaeConfig(c.n, c.m, c.num_experts, c.top_k, c.activation, group_size=group_size, op_mask=frozenset())
    dense = [{"up": e.w_up, "gate": e.w_gate, "down": e.w_down} for e in src.experts]
    return MolaeLayer(
        cfg,
        [LatentGroup() for _ in range(cfg.num_groups)],
        [LatentExpert() for _ in range(c.num_experts)],
        src.router,
        dense,
    )
