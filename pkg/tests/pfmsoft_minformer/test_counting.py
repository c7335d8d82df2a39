"""Tests for closed-form parameter counts and the ratios built on them."""

import logging
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from pfmsoft.minformer.attention import AttentionConfig
from pfmsoft.minformer.counting import (
    count_attention_params,
    count_mlp_params,
    count_params,
    count_qk,
    core_matrix_count,
    core_ratio,
    enumerate_params,
    relative_size,
    stacked_vo_count,
)
from pfmsoft.minformer.encoder import ModelConfig, initialize
from pfmsoft.minformer.errors import ConfigError
from pfmsoft.minformer.verify import random_model_config

logger = logging.getLogger(__name__)

BASE = ModelConfig()


def test_mlp_block():
    assert count_mlp_params(64, 4) == 2 * 4 * 64**2 + 4 * 64 + 64 == 33_088


def test_attention_counts_by_variant():
    n = 64
    assert count_attention_params(AttentionConfig(width=n)) == 4 * n * n
    assert count_attention_params(AttentionConfig(width=n, heads=4)) == 4 * n * n
    assert count_attention_params(AttentionConfig(width=n, qk_mode="collapsed", vo_mode="collapsed")) == 2 * n * n
    assert count_attention_params(AttentionConfig(width=n, qk_mode="shared", vo_mode="identity")) == n * n


@pytest.mark.parametrize("qk_mode", ["cholesky", "mirrored"])
def test_triangular_qk(qk_mode):
    assert count_qk(AttentionConfig(width=64, qk_mode=qk_mode)) == 2_080


def test_breakdown_sums_to_total():
    counted = count_params(BASE)
    assert sum(counted.breakdown.values()) == counted.total
    assert counted.breakdown["mlp"] == 6 * 33_088
    assert counted.breakdown["attention"] == 6 * 4 * 64**2
    assert counted.breakdown["class_token"] == 0


@pytest.mark.parametrize(
    "config",
    [
        BASE,
        replace(BASE, mlp_enabled=False),
        replace(BASE, heads=4, qk_mode="shared", vo_mode="identity", pooling="cls_token"),
        replace(BASE, qk_mode="cholesky", vo_mode="collapsed", encoders=2),
        ModelConfig(image_height=32, image_width=32, channels=3, patch_size=8, encoders=1),
    ],
    ids=["baseline", "no-mlp", "4H-shared-cls", "cholesky", "cifar"],
)
def test_count_equals_enumeration(config):
    assert count_params(config) == enumerate_params(initialize(config))


def test_count_equals_enumeration_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        config = random_model_config(rng)
        assert count_params(config).total == enumerate_params(initialize(config)).total, config


def test_mlp_removal_leaves_a_third_of_the_core():
    assert core_ratio(replace(BASE, mlp_enabled=False), BASE) == Fraction(1, 3)


def test_collapsed_identity_is_a_quarter_of_attention():
    reduced = replace(BASE, mlp_enabled=False, qk_mode="collapsed", vo_mode="identity")
    assert core_ratio(reduced, replace(BASE, mlp_enabled=False)) == Fraction(1, 4)


def test_full_collapse_is_half_of_attention():
    reduced = replace(BASE, mlp_enabled=False, qk_mode="collapsed", vo_mode="collapsed")
    assert core_ratio(reduced, replace(BASE, mlp_enabled=False)) == Fraction(1, 2)


def test_cholesky_ratio_to_full_matrix():
    n = 64
    assert Fraction(count_qk(AttentionConfig(width=n, qk_mode="cholesky")), n * n) == Fraction(n + 1, 2 * n)


def test_core_ratio_needs_a_baseline_core():
    with pytest.raises(ConfigError, match="encoders=0"):
        core_ratio(BASE, replace(BASE, encoders=0))
    assert core_ratio(replace(BASE, encoders=0), BASE) == 0


def test_core_excludes_biases():
    assert core_matrix_count(BASE) == 6 * (4 * 64**2 + 8 * 64**2)
    assert count_params(BASE).core == core_matrix_count(BASE) + 6 * (4 * 64 + 64)


def test_stacked_vo_count():
    config = replace(BASE, mlp_enabled=False)
    count, ratio = stacked_vo_count(config)
    assert count == 7 * 64**2
    assert ratio == Fraction(7, 24)


def test_relative_size():
    assert relative_size(BASE, BASE) == 1.0
    assert 0 < relative_size(replace(BASE, mlp_enabled=False), BASE) < 0.5
