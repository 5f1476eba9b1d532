"""Convert trained MoE weights into latent-expert (MoLAE) weights.

Per operator and per group of ``k`` experts the conversion is:

1. rank reduction: each expert matrix is replaced by its best rank-``r``
   approximation (optional; off by default);
2. factorization: the ``g`` expert matrices (each ``m x n``) are stacked into a
   ``gm x n`` matrix whose rank-``m_latent`` truncated SVD ``U S V^T`` gives the
   shared projection ``B = S^½ V^T`` and the per-expert blocks of ``U S^½``.
   The squared Frobenius error equals the discarded singular energy.

The down operator (``n x m``, applied after the expert map) is factored in
transposed orientation and transposed back, giving ``W_down = B_down A_down``.

Activation-aware factorization weights the error by calibration activations.
Two orientations occur:

* ``side="left"`` (down operator): activations hit the per-expert factor, the
  objective is ``sum_i ||X_i (W_i - A_i B)||^2`` with block-diagonal Gram
  ``diag(X_i^T X_i)``. Whitening each block by its Cholesky factor turns this
  into a plain truncated SVD, so the closed form is the global optimum.
* ``side="right"`` (up/gate): activations hit the shared factor, the objective
  is ``sum_i ||(W_i - A_i B) X_i||^2``. The closed form is only exact when all
  experts share one Gram matrix, so it is computed with the pooled Gram and
  then polished by alternating least squares, which never increases the
  objective.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import LinearOperator, cg

from . import linalg
from .errors import ArgumentError, NotPositiveDefiniteError, NumericalError
from .moe import OPERATORS, MoeLayer, RoutedFFN, activation, apply_linear
from .molae import (
    LatentExpert,
    LatentGroup,
    MolaeConfig,
    MolaeLayer,
    format_op_mask,
    group_members,
    parse_op_mask,
)

Mode = Literal["plain", "activation_aware"]

DEFAULT_LAMBDA_SCALE = 1e-6
ALS_MAX_ITER = 300
ALS_REL_TOL = 1e-8
DENSE_B_SOLVE_LIMIT = 512
CG_MAX_ITER = 50


@dataclass(frozen=True)
class TransformOptions:
    """Tunables for ``transform_layer``.

    ``latent_dim`` defaults to the expert width ``m``; ``target_rank=None``
    and ``rank_ratio=None`` both mean no rank reduction. ``lam=None`` uses
    ``1e-6 * trace(G) / dim(G)``, and only when Cholesky of ``G`` fails.
    """

    latent_dim: Optional[int] = None
    target_rank: Optional[int] = None
    rank_ratio: Optional[float] = None
    group_size: int = 1
    op_mask: frozenset = frozenset(OPERATORS)
    mode: Mode = "plain"
    lam: Optional[float] = None
    rank_tol: float = linalg.DEFAULT_RANK_TOL
    probes: int = 64
    probe_seed: int = 0
    max_workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "op_mask", parse_op_mask(self.op_mask))
        if self.mode not in ("plain", "activation_aware"):
            raise ArgumentError(f"mode must be 'plain' or 'activation_aware', got {self.mode!r}")
        if self.target_rank is not None and self.rank_ratio is not None:
            raise ArgumentError("give either target_rank or rank_ratio, not both")
        if self.target_rank is not None and self.target_rank < 1:
            raise ArgumentError(f"target_rank must be positive, got {self.target_rank}")
        if self.rank_ratio is not None and not 0.0 < self.rank_ratio <= 1.0:
            raise ArgumentError(f"rank_ratio must be in (0, 1], got {self.rank_ratio}")
        if self.lam is not None and self.lam < 0:
            raise ArgumentError(f"lambda must be non-negative, got {self.lam}")
        if self.group_size < 1:
            raise ArgumentError(f"group_size must be positive, got {self.group_size}")
        if self.probes < 0:
            raise ArgumentError("probes must be non-negative")

    def resolved_latent_dim(self, n: int, m: int) -> int:
        ld = m if self.latent_dim is None else self.latent_dim
        if not 1 <= ld <= m:
            raise ArgumentError(f"latent_dim {ld} must be in [1, m={m}]")
        if ld > n:
            raise ArgumentError(f"latent_dim {ld} exceeds hidden dim n={n}")
        if self.target_rank is not None and self.target_rank > ld:
            raise ArgumentError(f"target_rank {self.target_rank} exceeds latent_dim {ld}")
        return ld

    def to_dict(self) -> dict:
        d = asdict(self)
        d["op_mask"] = format_op_mask(self.op_mask)
        return d


@dataclass
class ActivationBatch:
    """Calibration inputs per expert: ``inputs[i]`` is ``n x T_i`` (columns are samples)."""

    inputs: list

    def __post_init__(self):
        self.inputs = [np.asarray(x, dtype=np.float64) for x in self.inputs]
        n = {x.shape[0] for x in self.inputs}
        if len(n) > 1 or any(x.ndim != 2 for x in self.inputs):
            raise ArgumentError("activation slices must be 2-D with a common row count n")

    @property
    def counts(self) -> list[int]:
        return [x.shape[1] for x in self.inputs]


def collect_activations(src: RoutedFFN, probes: np.ndarray) -> ActivationBatch:
    """Route ``probes`` (T x n) through ``src`` and keep, per expert, the inputs it receives."""
    probes = np.asarray(probes, dtype=np.float64)
    d = src.route(probes if probes.ndim == 2 else probes[None])
    return ActivationBatch(
        [probes[np.any(d.indices == i, axis=1)].T.copy() for i in range(src.config.num_experts)]
    )


# --- step 1: rank reduction ------------------------------------------------


def _rank_reduce(ws: Sequence[np.ndarray], r) -> tuple[list[np.ndarray], list[float]]:
    ranks = [r] * len(ws) if np.isscalar(r) else list(r)
    if len(ranks) != len(ws):
        raise ArgumentError("one target rank per matrix expected")
    out, discarded = [], []
    for w, ri in zip(ws, ranks):
        w = linalg.as_matrix(w)
        if ri is None or ri >= min(w.shape):
            out.append(w.copy())
            discarded.append(0.0)
            continue
        f = linalg.svd(w)
        out.append(linalg.truncate(f, int(ri)).reconstruct())
        discarded.append(linalg.residual_energy(f.s, int(ri)))
    return out, discarded


def rank_reduce_experts(ws: Sequence[np.ndarray], r) -> list[np.ndarray]:
    """Best rank-``r`` approximation of each matrix (``r`` may be a per-matrix list)."""
    return _rank_reduce(ws, r)[0]


# --- step 2: factorization -------------------------------------------------


@dataclass
class GroupFactorization:
    a: list  # g blocks, each m x m_latent
    b: np.ndarray  # m_latent x n
    residual: float  # discarded singular energy of the (possibly whitened) stack
    singular_values: np.ndarray
    stack_energy: float

    def composites(self) -> list[np.ndarray]:
        return [a @ self.b for a in self.a]


def _check_group(ws: Sequence[np.ndarray]) -> list[np.ndarray]:
    if len(ws) == 0:
        raise ArgumentError("factor_group needs at least one matrix")
    mats = [linalg.as_matrix(w) for w in ws]
    if any(w.shape != mats[0].shape for w in mats):
        raise ArgumentError("all matrices in a group must share one shape")
    return mats


def _check_latent(m_latent: int, g: int, m: int, n: int) -> None:
    if not 1 <= m_latent <= min(g * m, n):
        raise ArgumentError(f"m_latent={m_latent} outside [1, min(g*m, n)={min(g * m, n)}]")


def factor_group(ws: Sequence[np.ndarray], m_latent: int) -> GroupFactorization:
    """Shared ``B`` and per-matrix ``A_i`` minimizing ``sum_i ||W_i - A_i B||_F^2``."""
    mats = _check_group(ws)
    g, (m, n) = len(mats), mats[0].shape
    _check_latent(m_latent, g, m, n)
    stacked = np.vstack(mats)
    f = linalg.svd(stacked)
    a, b = linalg.factor_balanced(f, m_latent)
    return GroupFactorization(
        a=[a[i * m : (i + 1) * m] for i in range(g)],
        b=b,
        residual=linalg.residual_energy(f.s, m_latent),
        singular_values=f.s,
        stack_energy=math.fsum(float(v) ** 2 for v in f.s),
    )


@dataclass
class RefinedFactorization(GroupFactorization):
    objective: float = 0.0  # activation-weighted squared error of the returned factors
    plain_objective: float = 0.0  # same objective for the unweighted factorization
    lam: float = 0.0  # ridge added to the Gram blocks (0 when not needed)
    regularized: bool = False
    fallback_experts: list = field(default_factory=list)
    iterations: int = 0
    side: str = "right"


def _grams(mats, xs, side: str) -> tuple[list[np.ndarray], list[int]]:
    m, n = mats[0].shape
    dim = m if side == "left" else n
    grams, empty = [], []
    for i, x in enumerate(xs):
        x = np.asarray(x, dtype=np.float64)
        if side == "left":
            if x.ndim != 2 or x.shape[1] != m:
                raise ArgumentError(f"left activations must be T x {m}, got {x.shape}")
            size = x.shape[0]
            grams.append(x.T @ x)
        else:
            if x.ndim != 2 or x.shape[0] != n:
                raise ArgumentError(f"right activations must be {n} x T, got {x.shape}")
            size = x.shape[1]
            grams.append(x @ x.T)
        if size == 0:
            empty.append(i)
        elif not np.all(np.isfinite(grams[-1])):
            raise ArgumentError(f"activation slice {i} contains non-finite values")
    # unrouted experts are weighted like the plain objective, at the group's mean scale
    live = [np.trace(grams[i]) / dim for i in range(len(grams)) if i not in empty]
    scale = float(np.mean(live)) if live and np.mean(live) > 0 else 1.0
    for i in empty:
        grams[i] = scale * np.eye(dim)
    return grams, empty


def _default_lambda(grams: Sequence[np.ndarray]) -> float:
    total = sum(float(np.trace(g)) for g in grams)
    dim = sum(g.shape[0] for g in grams)
    lam = DEFAULT_LAMBDA_SCALE * total / dim
    return lam if lam > 0 else DEFAULT_LAMBDA_SCALE


def _cholesky_all(grams: Sequence[np.ndarray], lam: Optional[float]):
    """Cholesky of every block; on failure add ``lam * I`` to all blocks and retry once."""
    try:
        return [linalg.cholesky(g).l for g in grams], 0.0, False
    except NotPositiveDefiniteError:
        pass
    lam_used = _default_lambda(grams) if lam is None or lam == 0 else float(lam)
    try:
        return [linalg.cholesky(g + lam_used * np.eye(g.shape[0])).l for g in grams], lam_used, True
    except NotPositiveDefiniteError as exc:
        raise NumericalError(f"Gram matrix not positive definite even with lambda={lam_used:g}") from exc


def weighted_objective(mats, a_blocks, b, grams, side: str) -> float:
    """``sum_i tr(D_i^T G_i D_i)`` (left) or ``tr(D_i G_i D_i^T)`` (right), ``D_i = W_i - A_i B``."""
    total = []
    for w, a, g in zip(mats, a_blocks, grams):
        d = w - a @ b
        total.append(float(np.sum((g @ d) * d)) if side == "left" else float(np.sum((d @ g) * d)))
    return math.fsum(total)


def _refine_left(mats, chol, m_latent):
    m = mats[0].shape[0]
    whitened = np.vstack([l.T @ w for l, w in zip(chol, mats)])
    f = linalg.svd(whitened)
    at, b = linalg.factor_balanced(f, m_latent)
    a = [
        scipy.linalg.solve_triangular(l.T, at[i * m : (i + 1) * m], lower=False)
        for i, l in enumerate(chol)
    ]
    return a, b, f


def _solve_b(a_blocks, mats, grams, b0):
    l, n = b0.shape
    rhs = sum(a.T @ w @ g for a, w, g in zip(a_blocks, mats, grams))
    ps = np.stack([a.T @ a for a in a_blocks])
    if l * n <= DENSE_B_SOLVE_LIMIT:
        lhs = sum(np.kron(p, g) for p, g in zip(ps, grams))
        try:
            return scipy.linalg.solve(lhs, rhs.ravel(), assume_a="sym").reshape(l, n)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(lhs, rhs.ravel(), rcond=None)[0].reshape(l, n)
    gs = np.stack(grams)

    def matvec(v):
        return np.matmul(np.matmul(ps, v.reshape(l, n)), gs).sum(axis=0).ravel()

    op = LinearOperator((l * n, l * n), matvec=matvec, dtype=np.float64)
    # warm-started CG never raises the quadratic above its value at b0, so ALS stays monotone
    sol, _ = cg(op, rhs.ravel(), x0=b0.ravel(), rtol=1e-10, maxiter=CG_MAX_ITER)
    return sol.reshape(l, n)


def _solve_a(w, g, b):
    bg = b @ g
    lhs = bg @ b.T
    rhs = w @ bg.T
    try:
        return scipy.linalg.solve(lhs, rhs.T, assume_a="pos").T
    except (np.linalg.LinAlgError, ValueError):
        return np.linalg.lstsq(lhs, rhs.T, rcond=None)[0].T


def _refine_right(mats, grams, l_pool, m_latent, plain: GroupFactorization, max_iter: int):
    m = mats[0].shape[0]
    stacked = np.vstack(mats)
    f = linalg.svd(stacked @ l_pool)
    a, c = linalg.factor_balanced(f, m_latent)
    b = scipy.linalg.solve_triangular(l_pool.T, c.T, lower=False).T  # c @ inv(L)
    a = [a[i * m : (i + 1) * m] for i in range(len(mats))]
    obj = weighted_objective(mats, a, b, grams, "right")
    plain_obj = weighted_objective(mats, plain.a, plain.b, grams, "right")
    if plain_obj < obj:
        a, b, obj = [x.copy() for x in plain.a], plain.b.copy(), plain_obj
    it = 0
    for it in range(1, max_iter + 1):
        a_new = [_solve_a(w, g, b) for w, g in zip(mats, grams)]
        b_new = _solve_b(a_new, mats, grams, b)
        new_obj = weighted_objective(mats, a_new, b_new, grams, "right")
        if not np.isfinite(new_obj) or new_obj > obj:
            break
        improved = obj - new_obj
        a, b, obj = a_new, b_new, new_obj
        if improved <= ALS_REL_TOL * max(obj, np.finfo(float).tiny):
            break
    # rebalance the scale split between A and B; the products are unchanged
    na, nb = np.linalg.norm(np.vstack(a)), np.linalg.norm(b)
    if na > 0 and nb > 0:
        t = math.sqrt(na / nb)
        a = [x / t for x in a]
        b = b * t
    return a, b, f, it


def factor_group_refined(
    ws: Sequence[np.ndarray],
    xs: Sequence[np.ndarray],
    m_latent: int,
    lam: Optional[float] = None,
    side: Literal["left", "right"] = "right",
    max_iter: int = ALS_MAX_ITER,
) -> RefinedFactorization:
    """Activation-aware version of ``factor_group``.

    ``side="right"``: ``xs[i]`` is ``n x T_i`` and the error is ``(W_i - A_i B) X_i``.
    ``side="left"``: ``xs[i]`` is ``T_i x m`` and the error is ``X_i (W_i - A_i B)``.
    Empty slices fall back to unweighted error for that expert (listed in
    ``fallback_experts``).
    """
    if side not in ("left", "right"):
        raise ArgumentError(f"side must be 'left' or 'right', got {side!r}")
    mats = _check_group(ws)
    g, (m, n) = len(mats), mats[0].shape
    _check_latent(m_latent, g, m, n)
    if len(xs) != g:
        raise ArgumentError(f"got {len(xs)} activation slices for {g} matrices")
    grams, empty = _grams(mats, xs, side)
    plain = factor_group(mats, m_latent)
    if side == "left":
        chol_info = _cholesky_all(grams, lam)
        lam_used = chol_info[1]
        reg_grams = [gm + lam_used * np.eye(gm.shape[0]) for gm in grams] if chol_info[2] else grams
        a, b, f = _refine_left(mats, chol_info[0], m_latent)
        it = 0
    else:
        pooled = sum(grams) / g
        chol_info = _cholesky_all([pooled], lam)
        lam_used = chol_info[1]
        reg_grams = [gm + lam_used * np.eye(n) for gm in grams] if chol_info[2] else grams
        a, b, f, it = _refine_right(mats, reg_grams, chol_info[0][0], m_latent, plain, max_iter)
    return RefinedFactorization(
        a=a,
        b=b,
        residual=linalg.residual_energy(f.s, m_latent),
        singular_values=f.s,
        stack_energy=math.fsum(float(v) ** 2 for v in f.s),
        objective=weighted_objective(mats, a, b, reg_grams, side),
        plain_objective=weighted_objective(mats, plain.a, plain.b, reg_grams, side),
        lam=lam_used,
        regularized=chol_info[2],
        fallback_experts=empty,
        iterations=it,
        side=side,
    )


def check_exact_factorizability(
    ws: Sequence[np.ndarray], m_latent: int, tol: float = linalg.DEFAULT_RANK_TOL
) -> tuple[bool, int]:
    """Whether ``W_i = A_i B`` exactly with ``B`` of ``m_latent`` rows.

    True iff the kernels of all ``W_i`` share a subspace of dimension at least
    ``n - m_latent``; returns that common nullity alongside.
    """
    mats = [linalg.as_matrix(w) for w in ws]
    n = mats[0].shape[1]
    nullity = linalg.common_nullspace_dim(mats, tol)
    return nullity >= n - m_latent, nullity


# --- whole layer -----------------------------------------------------------


@dataclass
class OperatorGroupReport:
    operator: str
    group: int
    experts: list
    residual: float
    relative_residual: float
    retained_energy: float
    discarded_energy: float
    stack_energy: float
    measured_residual: float
    exact: bool
    common_nullity: int
    rank_reduction_energy: list
    target_ranks: list
    mode: str
    objective: Optional[float] = None
    plain_objective: Optional[float] = None
    lam: Optional[float] = None
    regularized: bool = False
    fallback_experts: list = field(default_factory=list)
    als_iterations: int = 0


@dataclass
class EquivalenceStats:
    max_rel_dev: float
    mean_rel_dev: float
    routing_agreement: float
    probes: int
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TransformReport:
    options: dict
    n: int
    m: int
    num_experts: int
    latent_dim: int
    groups: list
    forward: Optional[EquivalenceStats] = None

    @property
    def total_residual(self) -> float:
        return math.fsum(g.residual for g in self.groups)

    def to_dict(self) -> dict:
        return {
            "options": self.options,
            "n": self.n,
            "m": self.m,
            "num_experts": self.num_experts,
            "latent_dim": self.latent_dim,
            "total_residual": self.total_residual,
            "groups": [asdict(g) for g in self.groups],
            "forward": None if self.forward is None else self.forward.to_dict(),
        }


def _canonical(src: MoeLayer, i: int, which: str) -> np.ndarray:
    w = src.operator(i, which)
    return w.T if which == "down" else w


def _hidden(src: MoeLayer, i: int, x: np.ndarray) -> np.ndarray:
    e = src.experts[i]
    f, _ = activation(src.config.activation)
    xt = x.T
    return apply_linear(e.w_up, xt) * f(apply_linear(e.w_gate, xt))  # T x m


def _target_ranks(opts: TransformOptions, mats) -> list:
    if opts.target_rank is not None:
        return [opts.target_rank] * len(mats)
    if opts.rank_ratio is not None:
        return [linalg.ratio_to_rank(opts.rank_ratio, max(1, linalg.matrix_rank(w, opts.rank_tol))) for w in mats]
    return [None] * len(mats)


def _transform_one(src, opts, acts, which, g, latent_dim):
    cfg = src.config
    members = list(group_members(g, opts.group_size, cfg.num_experts))
    mats = [_canonical(src, i, which) for i in members]
    ranks = _target_ranks(opts, mats)
    reduced, dropped = _rank_reduce(mats, ranks)
    extra = {}
    if opts.mode == "activation_aware":
        if which == "down":
            xs = [_hidden(src, i, acts.inputs[i]) for i in members]
            side = "left"
        else:
            xs = [acts.inputs[i] for i in members]
            side = "right"
        fac = factor_group_refined(reduced, xs, latent_dim, opts.lam, side)
        extra = dict(
            objective=fac.objective,
            plain_objective=fac.plain_objective,
            lam=fac.lam,
            regularized=fac.regularized,
            fallback_experts=[members[j] for j in fac.fallback_experts],
            als_iterations=fac.iterations,
        )
    else:
        fac = factor_group(reduced, latent_dim)
    exact, nullity = check_exact_factorizability(reduced, latent_dim, opts.rank_tol)
    measured = math.fsum(float(np.sum((w - c) ** 2)) for w, c in zip(reduced, fac.composites()))
    energy = fac.stack_energy
    report = OperatorGroupReport(
        operator=which,
        group=g,
        experts=members,
        residual=fac.residual,
        relative_residual=fac.residual / energy if energy > 0 else 0.0,
        retained_energy=energy - fac.residual,
        discarded_energy=fac.residual,
        stack_energy=energy,
        measured_residual=measured,
        exact=exact,
        common_nullity=nullity,
        rank_reduction_energy=dropped,
        target_ranks=ranks,
        mode=opts.mode,
        **extra,
    )
    return fac, report


def _pad(fac, m: int, latent_dim: int):
    """Zero-pad factors from ``latent_dim`` to the layer's fixed width ``m``."""
    pad = m - latent_dim
    a = [np.pad(x, ((0, 0), (0, pad))) for x in fac.a]
    b = np.pad(fac.b, ((0, pad), (0, 0)))
    return a, b


def transform_layer(
    src: MoeLayer, opts: TransformOptions, acts: Optional[ActivationBatch] = None
) -> tuple[MolaeLayer, TransformReport]:
    """Build the latent-expert layer for ``src``.

    Operators outside ``opts.op_mask`` and the router are carried over
    unchanged (same arrays). Any failure aborts before a layer is assembled.
    """
    if not isinstance(src, MoeLayer):
        raise ArgumentError("transform_layer expects a MoeLayer source")
    cfg = src.config
    if opts.group_size > cfg.num_experts:
        raise ArgumentError(f"group_size {opts.group_size} exceeds num_experts {cfg.num_experts}")
    latent_dim = opts.resolved_latent_dim(cfg.n, cfg.m)
    if opts.mode == "activation_aware":
        if acts is None:
            raise ArgumentError("activation_aware mode needs an ActivationBatch")
        if len(acts.inputs) != cfg.num_experts:
            raise ArgumentError(f"need activations for {cfg.num_experts} experts, got {len(acts.inputs)}")
        if any(x.shape[0] != cfg.n for x in acts.inputs):
            raise ArgumentError(f"activation slices must have {cfg.n} rows")
    mcfg = MolaeConfig(
        cfg.n, cfg.m, cfg.num_experts, cfg.top_k, cfg.activation, group_size=opts.group_size, op_mask=opts.op_mask
    )
    tasks = [(w, g) for w in OPERATORS if w in opts.op_mask for g in range(mcfg.num_groups)]
    if opts.max_workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=opts.max_workers) as pool:
            results = list(pool.map(lambda t: _transform_one(src, opts, acts, t[0], t[1], latent_dim), tasks))
    else:
        results = [_transform_one(src, opts, acts, w, g, latent_dim) for w, g in tasks]

    b_parts = [dict() for _ in range(mcfg.num_groups)]
    a_parts = [dict() for _ in range(cfg.num_experts)]
    for (which, g), (fac, _) in zip(tasks, results):
        a, b = _pad(fac, cfg.m, latent_dim)
        members = group_members(g, opts.group_size, cfg.num_experts)
        if which == "down":
            b_parts[g]["b_down"] = b.T
            for i, ai in zip(members, a):
                a_parts[i]["a_down"] = ai.T
        else:
            b_parts[g][f"b_{which}"] = b
            for i, ai in zip(members, a):
                a_parts[i][f"a_{which}"] = ai
    dense = [{w: src.operator(i, w) for w in OPERATORS if w not in opts.op_mask} for i in range(cfg.num_experts)]
    out = MolaeLayer(
        mcfg,
        [LatentGroup(**p) for p in b_parts],
        [LatentExpert(**p) for p in a_parts],
        src.router,
        dense,
    )
    report = TransformReport(
        options=opts.to_dict(),
        n=cfg.n,
        m=cfg.m,
        num_experts=cfg.num_experts,
        latent_dim=latent_dim,
        groups=[r for _, r in results],
    )
    if opts.probes > 0:
        report.forward = verify_equivalence(src, out, opts.probes, opts.probe_seed)
    return out, report


def verify_equivalence(a: RoutedFFN, b: RoutedFFN, probes: int = 64, seed: int = 0) -> EquivalenceStats:
    """Relative output deviation of ``b`` from ``a`` on standard-normal probes.

    Deviation is ``||y_a - y_b|| / ||y_a - x||``: measured against the expert
    mixture, not the full output, so the residual path cannot mask errors.
    """
    ca, cb = a.config, b.config
    if (ca.n, ca.num_experts, ca.top_k) != (cb.n, cb.num_experts, cb.top_k):
        raise ArgumentError("layers differ in (n, num_experts, top_k)")
    if probes < 1:
        raise ArgumentError("need at least one probe")
    x = np.random.default_rng(seed).standard_normal((probes, ca.n))
    ya, yb = a.forward(x), b.forward(x)
    num = np.linalg.norm(ya - yb, axis=1)
    den = np.linalg.norm(ya - x, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        dev = np.where(num == 0, 0.0, num / den)
    agree = np.all(np.sort(a.route(x).indices, axis=1) == np.sort(b.route(x).indices, axis=1), axis=1)
    return EquivalenceStats(
        max_rel_dev=float(dev.max()),
        mean_rel_dev=float(dev.mean()),
        routing_agreement=float(agree.mean()),
        probes=probes,
        seed=seed,
    )
