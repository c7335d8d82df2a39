"""Dense numeric kernels shared by every other module.

A Tensor is a plain ``numpy.ndarray`` of rank 1 to 3 (rank 4 for image
batches). All functions here are pure: they never modify their inputs,
and they raise :class:`NumericError` rather than return NaN or Inf.

Each forward kernel that carries learnable state has a matching
``*_backward`` that returns gradients with respect to its inputs.
"""

import logging
import math
from typing import Any

import numpy as np
import numpy.typing as npt
from scipy.special import erf

from pfmsoft.minformer.errors import NumericError, ShapeError

logger = logging.getLogger(__name__)

Tensor = npt.NDArray[np.floating[Any]]

DEFAULT_DTYPE = np.float64
DTYPES: dict[str, type[np.floating[Any]]] = {"f64": np.float64, "f32": np.float32}

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def ensure_finite(x: Tensor, where: str) -> Tensor:
    """Return ``x`` unchanged, or raise if any entry is NaN or infinite.

    Args:
        x: The array to check.
        where: Name of the producing operation, used in the error message.

    Returns:
        The same array.

    Raises:
        NumericError: If ``x`` holds a non-finite value.
    """
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NumericError(f"{where}: {bad} non-finite value(s) in array of shape {x.shape}")
    return x


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``a[..., m, k]`` and ``b[..., k, n]``.

    Leading batch axes broadcast the way ``numpy.matmul`` does.

    Raises:
        ShapeError: If the inner extents differ or either operand is rank 1.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return ensure_finite(np.matmul(a, b), "matmul")


def softmax_rows(s: Tensor, allowed: npt.NDArray[np.bool_] | None = None) -> Tensor:
    """Softmax over the last axis with per-row max subtraction.

    Args:
        s: Finite scores, shape ``[..., m, n]``.
        allowed: Optional boolean mask broadcastable to ``s``. Entries that
            are not allowed get weight exactly 0. Every row must allow at
            least one entry.

    Returns:
        Nonnegative weights whose rows sum to 1.
    """
    ensure_finite(s, "softmax_rows")
    if allowed is None:
        shifted = s - np.max(s, axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        row_max = np.max(s, axis=-1, keepdims=True, where=allowed, initial=-np.inf)
        e = np.where(allowed, np.exp(np.where(allowed, s - row_max, 0.0)), 0.0)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_rows_backward(a: Tensor, da: Tensor) -> Tensor:
    """Gradient of the scores given the softmax output ``a`` and its gradient."""
    return a * (da - np.sum(da * a, axis=-1, keepdims=True))


def gaussian_cdf(x: Tensor) -> Tensor:
    """Standard normal CDF, computed from the exact error function."""
    return 0.5 * (1.0 + erf(x / _SQRT_2))


def gelu(x: Tensor) -> Tensor:
    """Elementwise ``x * Phi(x)`` with the exact Gaussian CDF."""
    ensure_finite(x, "gelu")
    return x * gaussian_cdf(x)


def gelu_backward(x: Tensor, dy: Tensor) -> Tensor:
    """Gradient of :func:`gelu` at ``x``."""
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dy * (gaussian_cdf(x) + x * pdf)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each row of ``x[..., n]`` then scale by gamma and shift by beta.

    Args:
        x: Input rows.
        gamma: Scale, shape ``[n]``.
        beta: Shift, shape ``[n]``.
        eps: Variance floor, must be positive.

    Returns:
        Array shaped like ``x``.
    """
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be positive, got {eps}")
    n = x.shape[-1]
    if n < 1 or gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(
            f"layer_norm: row width {n} does not match gamma {gamma.shape} / beta {beta.shape}"
        )
    ensure_finite(x, "layer_norm")
    x_hat, _ = _normalize(x, eps)
    return gamma * x_hat + beta


def layer_norm_backward(
    x: Tensor, gamma: Tensor, dy: Tensor, eps: float = 1e-6
) -> tuple[Tensor, Tensor, Tensor]:
    """Gradients of :func:`layer_norm` with respect to x, gamma and beta."""
    x_hat, inv_std = _normalize(x, eps)
    n = x.shape[-1]
    reduce_axes = tuple(range(x.ndim - 1))
    dgamma = np.sum(dy * x_hat, axis=reduce_axes)
    dbeta = np.sum(dy, axis=reduce_axes)
    dx_hat = dy * gamma
    dx = (inv_std / n) * (
        n * dx_hat
        - np.sum(dx_hat, axis=-1, keepdims=True)
        - x_hat * np.sum(dx_hat * x_hat, axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def _normalize(x: Tensor, eps: float) -> tuple[Tensor, Tensor]:
    mean = np.mean(x, axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return centered * inv_std, inv_std


def glorot_uniform(
    rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int
) -> Tensor:
    """Glorot-uniform initial values for a weight array."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
