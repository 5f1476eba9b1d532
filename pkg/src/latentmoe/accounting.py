"""Closed-form parameter / FLOP counts and a census of stored weights.

FLOP counts follow the published per-layer formulas literally: one term per
matrix entry (no factor 2 for multiply-accumulate), ``2m`` per expert for the
activation and Hadamard product, and all ``N`` experts counted. Router weights
are excluded from every comparison and reported on their own.

Group count in the formulas is ``floor(N / k)``. A constructed layer holds
``ceil(N / k)`` groups, so when ``k`` does not divide ``N`` the census differs
from the formula; ``CostReport.group_count_mismatch`` flags that case.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

from .errors import ArgumentError
from .moe import OPERATORS, MoeLayer, RoutedFFN
from .molae import MolaeLayer, format_op_mask, parse_op_mask


@dataclass(frozen=True)
class ArchSpec:
    n: int
    m: int
    num_experts: int
    group_size: int = 1
    op_mask: frozenset = frozenset(OPERATORS)
    top_k: int = 1

    def __post_init__(self):
        for name in ("n", "m", "num_experts", "group_size", "top_k"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ArgumentError(f"{name} must be a positive integer, got {v!r}")
        if self.group_size > self.num_experts:
            raise ArgumentError(f"group_size {self.group_size} exceeds num_experts {self.num_experts}")
        if self.top_k > self.num_experts:
            raise ArgumentError(f"top_k {self.top_k} exceeds num_experts {self.num_experts}")
        object.__setattr__(self, "op_mask", parse_op_mask(self.op_mask))

    @property
    def formula_groups(self) -> int:
        return self.num_experts // self.group_size

    @property
    def actual_groups(self) -> int:
        return math.ceil(self.num_experts / self.group_size)

    @classmethod
    def from_layer(cls, layer: RoutedFFN) -> "ArchSpec":
        c = layer.config
        if isinstance(layer, MolaeLayer):
            return cls(c.n, c.m, c.num_experts, c.group_size, c.op_mask, c.top_k)
        return cls(c.n, c.m, c.num_experts, 1, frozenset(OPERATORS), c.top_k)


def moe_param_count(spec: ArchSpec) -> int:
    return 3 * spec.num_experts * spec.m * spec.n


def _per_operator(spec: ArchSpec, groups: int) -> int:
    N, m, n = spec.num_experts, spec.m, spec.n
    total = 0
    for op in OPERATORS:
        total += N * m * m + groups * m * n if op in spec.op_mask else N * m * n
    return total


def molae_param_count(spec: ArchSpec) -> int:
    """``3Nm^2 + 3 floor(N/k) mn`` for a full mask; dense ``Nmn`` terms for unmasked operators."""
    return _per_operator(spec, spec.formula_groups)


def moe_flops(spec: ArchSpec) -> int:
    return (3 * spec.m * spec.n + 2 * spec.m) * spec.num_experts


def molae_flops(spec: ArchSpec) -> int:
    """``(3m^2 + 2m)N + 3 floor(N/k) mn`` for a full mask."""
    return _per_operator(spec, spec.formula_groups) + 2 * spec.m * spec.num_experts


def moe_active_flops(spec: ArchSpec) -> int:
    return (3 * spec.m * spec.n + 2 * spec.m) * spec.top_k


def molae_active_flops(spec: ArchSpec) -> int:
    # worst case: the top_k experts land in distinct groups
    K, m, n = spec.top_k, spec.m, spec.n
    touched = min(K, spec.actual_groups)
    total = 2 * m * K
    for op in OPERATORS:
        total += K * m * m + touched * m * n if op in spec.op_mask else K * m * n
    return total


def router_param_count(spec: ArchSpec) -> int:
    return spec.num_experts * spec.n


def census(layer: RoutedFFN) -> int:
    """Number of stored FFN weights in a constructed layer, router excluded."""
    return sum(int(v.size) for k, v in layer.parameters().items() if k != "router")


@dataclass
class CostReport:
    n: int
    m: int
    num_experts: int
    group_size: int
    top_k: int
    op_mask: str
    moe_params: int
    molae_params: int
    moe_flops: int
    molae_flops: int
    param_ratio: float
    flop_ratio: float
    param_savings: float
    flop_savings: float
    formula_groups: int
    actual_groups: int
    group_count_mismatch: bool
    molae_census_params: int
    router_params: int
    moe_param_bytes_fp32: int
    molae_param_bytes_fp32: int
    extension_active_flops: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        rows = [
            ("", "MoE", "MoLAE", "ratio"),
            ("parameters", f"{self.moe_params:,}", f"{self.molae_params:,}", f"{self.param_ratio:.4f}"),
            ("FLOPs/forward", f"{self.moe_flops:,}", f"{self.molae_flops:,}", f"{self.flop_ratio:.4f}"),
            (
                "active FLOPs*",
                f"{self.extension_active_flops['moe']:,}",
                f"{self.extension_active_flops['molae']:,}",
                f"{self.extension_active_flops['molae'] / self.extension_active_flops['moe']:.4f}",
            ),
        ]
        widths = [max(len(r[c]) for r in rows) for c in range(4)]
        lines = [
            f"n={self.n} m={self.m} N={self.num_experts} k={self.group_size} "
            f"top_k={self.top_k} ops={self.op_mask or 'none'}"
        ]
        for r in rows:
            lines.append("  ".join(r[c].rjust(widths[c]) if c else r[c].ljust(widths[c]) for c in range(4)))
        lines.append(f"router parameters (excluded above): {self.router_params:,}")
        lines.append("* extension: only top_k experts counted, worst-case distinct groups")
        if self.group_count_mismatch:
            lines.append(
                f"note: k does not divide N; formula uses {self.formula_groups} groups, "
                f"a built layer stores {self.actual_groups} (census {self.molae_census_params:,})"
            )
        return "\n".join(lines)


def cost_report(spec: ArchSpec) -> CostReport:
    mp, lp = moe_param_count(spec), molae_param_count(spec)
    mf, lf = moe_flops(spec), molae_flops(spec)
    return CostReport(
        n=spec.n,
        m=spec.m,
        num_experts=spec.num_experts,
        group_size=spec.group_size,
        top_k=spec.top_k,
        op_mask=format_op_mask(spec.op_mask),
        moe_params=mp,
        molae_params=lp,
        moe_flops=mf,
        molae_flops=lf,
        param_ratio=lp / mp,
        flop_ratio=lf / mf,
        param_savings=1.0 - lp / mp,
        flop_savings=1.0 - lf / mf,
        formula_groups=spec.formula_groups,
        actual_groups=spec.actual_groups,
        group_count_mismatch=spec.formula_groups != spec.actual_groups,
        molae_census_params=_per_operator(spec, spec.actual_groups),
        router_params=router_param_count(spec),
        moe_param_bytes_fp32=4 * mp,
        molae_param_bytes_fp32=4 * lp,
        extension_active_flops={"moe": moe_active_flops(spec), "molae": molae_active_flops(spec)},
    )


def layer_cost_report(layer: RoutedFFN) -> CostReport:
    """Cost report for a layer's architecture, with the census checked against the formula."""
    spec = ArchSpec.from_layer(layer)
    rep = cost_report(spec)
    counted = census(layer)
    expected = rep.moe_params if isinstance(layer, MoeLayer) else rep.molae_census_params
    if counted != expected:
        raise ArgumentError(f"census {counted} disagrees with closed form {expected}")
    return rep
