"""Seeded synthetic layers.

Weights are Gaussian with fan-in scaling (std ``1/sqrt(fan_in)``). ``planted``
builds a MoE layer that is exactly MoLAE-realizable at group size ``k``: every
group shares true projections and each expert matrix is materialized as the
product of a random per-expert map and its group's projection.
"""

from __future__ import annotations

import numpy as np

from .errors import ArgumentError
from .moe import OPERATORS, ExpertWeights, MoeConfig, MoeLayer, RouterWeights
from .molae import LatentExpert, LatentGroup, MolaeConfig, MolaeLayer, group_members

KINDS = ("moe", "molae", "planted")


def _gauss(rng: np.random.Generator, shape: tuple[int, int], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) / np.sqrt(fan_in)


def _router(rng, cfg: MoeConfig) -> RouterWeights:
    return RouterWeights(_gauss(rng, (cfg.num_experts, cfg.n), cfg.n))


def generate_moe(cfg: MoeConfig, seed: int = 0) -> MoeLayer:
    rng = np.random.default_rng(seed)
    n, m = cfg.n, cfg.m
    experts = [
        ExpertWeights(_gauss(rng, (m, n), n), _gauss(rng, (m, n), n), _gauss(rng, (n, m), m))
        for _ in range(cfg.num_experts)
    ]
    return MoeLayer(cfg, experts, _router(rng, cfg))


def _latent_parts(rng, cfg: MolaeConfig):
    n, m = cfg.n, cfg.m
    groups = []
    for _ in range(cfg.num_groups):
        groups.append(
            LatentGroup(
                **{
                    f"b_{w}": _gauss(rng, (n, m) if w == "down" else (m, n), m if w == "down" else n)
                    for w in OPERATORS
                    if w in cfg.op_mask
                }
            )
        )
    latent = [
        LatentExpert(**{f"a_{w}": _gauss(rng, (m, m), m) for w in OPERATORS if w in cfg.op_mask})
        for _ in range(cfg.num_experts)
    ]
    dense = [
        {w: _gauss(rng, (n, m) if w == "down" else (m, n), m if w == "down" else n) for w in OPERATORS if w not in cfg.op_mask}
        for _ in range(cfg.num_experts)
    ]
    return groups, latent, dense


def generate_molae(cfg: MolaeConfig, seed: int = 0) -> MolaeLayer:
    rng = np.random.default_rng(seed)
    groups, latent, dense = _latent_parts(rng, cfg)
    return MolaeLayer(cfg, groups, latent, _router(rng, cfg), dense)


def generate_planted(cfg: MolaeConfig, seed: int = 0) -> MoeLayer:
    """Dense MoE layer whose operators factor exactly with group size ``cfg.group_size``."""
    rng = np.random.default_rng(seed)
    full = MolaeConfig(cfg.n, cfg.m, cfg.num_experts, cfg.top_k, cfg.activation, group_size=cfg.group_size)
    groups, latent, _ = _latent_parts(rng, full)
    experts = [None] * cfg.num_experts
    for g, grp in enumerate(groups):
        for i in group_members(g, cfg.group_size, cfg.num_experts):
            a = latent[i]
            experts[i] = ExpertWeights(a.a_up @ grp.b_up, a.a_gate @ grp.b_gate, grp.b_down @ a.a_down)
    return MoeLayer(full.base(), experts, _router(rng, full))


def generate(kind: str, cfg, seed: int = 0):
    if kind == "moe":
        base = cfg.base() if isinstance(cfg, MolaeConfig) else cfg
        return generate_moe(base, seed)
    if kind not in KINDS:
        raise ArgumentError(f"unknown kind {kind!r}; choose from {', '.join(KINDS)}")
    if not isinstance(cfg, MolaeConfig):
        cfg = MolaeConfig(cfg.n, cfg.m, cfg.num_experts, cfg.top_k, cfg.activation)
    if kind == "molae":
        return generate_molae(cfg, seed)
    return generate_planted(cfg, seed)
