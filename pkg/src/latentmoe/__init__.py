"""Mixture-of-experts layers, their latent-expert reparameterization, and conversion tools."""

from .accounting import ArchSpec, census, cost_report, molae_flops, molae_param_count, moe_flops, moe_param_count
from .container import load, save
from .errors import (
    ArgumentError,
    FormatError,
    LatentMoeError,
    NotPositiveDefiniteError,
    NumericalError,
    StateError,
    VerificationError,
)
from .moe import ExpertWeights, MoeConfig, MoeLayer, RouterWeights, aux_load_balance_loss, route_stats
from .molae import LatentExpert, LatentGroup, MolaeConfig, MolaeLayer, group_index
from .synth import generate
from .transform import (
    ActivationBatch,
    TransformOptions,
    check_exact_factorizability,
    factor_group,
    factor_group_refined,
    transform_layer,
    verify_equivalence,
)

__version__ = "0.1.0"
