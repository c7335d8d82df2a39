"""Closed-form parameter counts and the capacity arithmetic built on them.

The formulas here are written out independently of the array shapes in
:mod:`pfmsoft.minformer.encoder`, so comparing :func:`count_params` with
:func:`enumerate_params` of a fresh model is a real check.
"""

import logging
from dataclasses import dataclass, field
from fractions import Fraction

from pfmsoft.minformer.attention import AttentionConfig
from pfmsoft.minformer.encoder import ModelConfig, ModelParams, component_of
from pfmsoft.minformer.errors import ConfigError

logger = logging.getLogger(__name__)

COMPONENTS = ("embedding", "positional", "class_token", "attention", "norms", "mlp", "head")


@dataclass(frozen=True)
class ParamCount:
    """Total parameter count P with a per-component breakdown."""

    total: int
    breakdown: dict[str, int] = field(default_factory=dict)

    @property
    def core(self) -> int:
        """Attention plus MLP parameters of all encoders."""
        return self.breakdown.get("attention", 0) + self.breakdown.get("mlp", 0)


def count_qk(config: AttentionConfig) -> int:
    n = config.width
    match config.qk_mode:
        case "separate":
            # H heads of two [N, N/H] matrices.
            return 2 * n * n
        case "shared" | "collapsed":
            return n * n
        case _:
            return n * (n + 1) // 2


def count_vo(config: AttentionConfig) -> int:
    n = config.width
    match config.vo_mode:
        case "separate":
            return 2 * n * n
        case "collapsed":
            return n * n
        case _:
            return 0


def count_attention_params(config: AttentionConfig) -> int:
    """Stored values of one attention module."""
    return count_qk(config) + count_vo(config)


def count_mlp_params(width: int, multiple: int) -> int:
    """Weights and biases of one MLP block: ``2hN^2 + hN + N``."""
    return 2 * multiple * width * width + multiple * width + width


def count_params(config: ModelConfig) -> ParamCount:
    """Closed-form parameter count of a model.

    Raises:
        VariantError: If the config's attention variant is illegal.
    """
    n, s, m = config.width, config.encoders, config.classes
    norms_per_encoder = 2 if config.mlp_enabled else 1
    breakdown = {
        "embedding": config.patch_dim * n + n,
        "positional": config.patches * n,
        "class_token": n if config.pooling == "cls_token" else 0,
        "attention": s * count_attention_params(config.attention),
        "norms": s * norms_per_encoder * 2 * n + 2 * n,
        "mlp": s * count_mlp_params(n, config.mlp_multiple) if config.mlp_enabled else 0,
        "head": n * m + m,
    }
    return ParamCount(total=sum(breakdown.values()), breakdown=breakdown)


def enumerate_params(params: ModelParams) -> ParamCount:
    """Tally the arrays actually held by ``params``."""
    breakdown = dict.fromkeys(COMPONENTS, 0)
    for name, value in params.named_arrays().items():
        breakdown[component_of(name)] += int(value.size)
    return ParamCount(total=sum(breakdown.values()), breakdown=breakdown)


def core_matrix_count(config: ModelConfig) -> int:
    """Attention and MLP weight-matrix entries of all encoders, biases excluded."""
    mlp = 2 * config.mlp_multiple * config.width**2 if config.mlp_enabled else 0
    return config.encoders * (count_attention_params(config.attention) + mlp)


def core_ratio(config: ModelConfig, baseline: ModelConfig) -> Fraction:
    """Exact ratio of the weight-matrix cores of two configs.

    Raises:
        ConfigError: When the baseline has no encoder core to compare against.
    """
    base = core_matrix_count(baseline)
    if not base:
        raise ConfigError(f"baseline has no attention or MLP matrices (encoders={baseline.encoders})")
    return Fraction(core_matrix_count(config), base)


def stacked_vo_count(config: ModelConfig) -> tuple[int, Fraction]:
    """Size of a single-head, MLP-free stack sharing one ``W_VO`` product.

    ``S`` collapsed ``W_QK`` matrices plus one ``W_VO`` give ``(S + 1) N^2``
    values, compared with ``4 S N^2`` for separate matrices.

    Returns:
        The count and its exact ratio to the separate-matrix stack.
    """
    n, s = config.width, config.encoders
    count = (s + 1) * n * n
    return count, Fraction(count, 4 * s * n * n) if s else Fraction(0)


def relative_size(config: ModelConfig, baseline: ModelConfig) -> float:
    """Total parameters of ``config`` as a fraction of ``baseline``'s."""
    return count_params(config).total / count_params(baseline).total
