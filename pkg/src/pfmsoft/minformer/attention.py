"""Self-attention and its reduced variants.

Query/key side (``qk_mode``):

- ``separate``: per head ``W_Q`` and ``W_K`` of shape ``[N, N/H]``.
- ``collapsed``: one ``W_QK = W_Q W_K^T`` of shape ``[N, N]`` (single head).
- ``shared``: ``W_Q`` reused as ``W_K``, giving a symmetric similarity.
- ``cholesky``: ``W_QK = T T^T`` with ``T`` lower triangular, stored as its
  packed lower triangle (single head).
- ``mirrored``: a symmetric ``W_QK`` stored as its packed lower triangle and
  mirrored over the diagonal (single head).

Value/projection side (``vo_mode``):

- ``separate``: per head ``W_V [N, N/H]`` and ``W_O [N/H, N]``.
- ``collapsed``: one ``W_VO = W_V W_O`` of shape ``[N, N]`` (single head).
- ``identity``: no value or projection matrices; each head returns the
  weighted mean of its inputs and the heads are summed.

No projection carries a bias. Logits are unscaled unless ``scale_logits``
is set, in which case they are multiplied by ``1/sqrt(N/H)``.

Every function accepts ``x`` with optional leading batch axes,
``[..., L, N]``.
"""

import logging
import math
from dataclasses import dataclass, field, fields
from functools import cache
from typing import Any, Literal, get_args

import numpy as np
import numpy.typing as npt

from pfmsoft.minformer.errors import ShapeError, VariantError
from pfmsoft.minformer.tensor import (
    Tensor,
    ensure_finite,
    glorot_uniform,
    matmul,
    softmax_rows,
    softmax_rows_backward,
)

logger = logging.getLogger(__name__)

QKMode = Literal["separate", "collapsed", "shared", "cholesky", "mirrored"]
VOMode = Literal["separate", "collapsed", "identity"]
MaskMode = Literal["full", "causal"]

QK_MODES: tuple[str, ...] = get_args(QKMode)
VO_MODES: tuple[str, ...] = get_args(VOMode)
MASK_MODES: tuple[str, ...] = get_args(MaskMode)

SINGLE_HEAD_QK_MODES = frozenset({"collapsed", "cholesky", "mirrored"})
SINGLE_HEAD_VO_MODES = frozenset({"collapsed"})

CHOLESKY_NOISE = 0.01


@dataclass(frozen=True)
class AttentionConfig:
    """Shape and variant of one attention module."""

    width: int
    heads: int = 1
    qk_mode: QKMode = "separate"
    vo_mode: VOMode = "separate"
    mask: MaskMode = "full"
    scale_logits: bool = False

    def __post_init__(self) -> None:
        if self.width < 1:
            raise VariantError(f"width must be positive, got {self.width}")
        if self.heads < 1 or self.width % self.heads != 0:
            raise VariantError(f"heads={self.heads} must be positive and divide width={self.width}")
        if self.qk_mode not in QK_MODES:
            raise VariantError(f"unknown qk_mode {self.qk_mode!r}, expected one of {QK_MODES}")
        if self.vo_mode not in VO_MODES:
            raise VariantError(f"unknown vo_mode {self.vo_mode!r}, expected one of {VO_MODES}")
        if self.mask not in MASK_MODES:
            raise VariantError(f"unknown mask {self.mask!r}, expected one of {MASK_MODES}")
        if self.heads > 1 and self.qk_mode in SINGLE_HEAD_QK_MODES:
            raise VariantError(f"qk_mode={self.qk_mode} requires heads == 1, got {self.heads}")
        if self.heads > 1 and self.vo_mode in SINGLE_HEAD_VO_MODES:
            raise VariantError(f"vo_mode={self.vo_mode} requires heads == 1, got {self.heads}")

    @property
    def head_width(self) -> int:
        """Width ``N/H`` of each head's query, key and value space."""
        return self.width // self.heads

    @property
    def logit_scale(self) -> float:
        return 1.0 / math.sqrt(self.head_width) if self.scale_logits else 1.0


@dataclass
class AttentionParams:
    """Weights of one attention module; only the arrays of its variant are set.

    The same type carries gradients, with the same fields present.
    """

    w_q: Tensor | None = None
    w_k: Tensor | None = None
    w_qk: Tensor | None = None
    t_qk: Tensor | None = None
    s_qk: Tensor | None = None
    w_v: Tensor | None = None
    w_o: Tensor | None = None
    w_vo: Tensor | None = None

    def arrays(self) -> dict[str, Tensor]:
        """The present arrays, in a fixed field order."""
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}

    @classmethod
    def from_arrays(cls, arrays: dict[str, Tensor]) -> "AttentionParams":
        return cls(**arrays)

    def size(self) -> int:
        return sum(int(a.size) for a in self.arrays().values())


def param_shapes(config: AttentionConfig) -> dict[str, tuple[int, ...]]:
    """Shapes of the arrays stored for ``config``, in field order."""
    n, h, d = config.width, config.heads, config.head_width
    tri = n * (n + 1) // 2
    shapes: dict[str, tuple[int, ...]] = {}
    match config.qk_mode:
        case "separate":
            shapes["w_q"] = (h, n, d)
            shapes["w_k"] = (h, n, d)
        case "shared":
            shapes["w_q"] = (h, n, d)
        case "collapsed":
            shapes["w_qk"] = (n, n)
        case "cholesky":
            shapes["t_qk"] = (tri,)
        case "mirrored":
            shapes["s_qk"] = (tri,)
    match config.vo_mode:
        case "separate":
            shapes["w_v"] = (h, n, d)
            shapes["w_o"] = (h, d, n)
        case "collapsed":
            shapes["w_vo"] = (n, n)
        case "identity":
            pass
    return shapes


def check_params(params: AttentionParams, config: AttentionConfig) -> None:
    """Raise unless ``params`` holds exactly the arrays ``config`` calls for."""
    expected = param_shapes(config)
    present = {k: v.shape for k, v in params.arrays().items()}
    if set(present) != set(expected):
        raise VariantError(
            f"params hold {sorted(present)} but qk_mode={config.qk_mode}, "
            f"vo_mode={config.vo_mode} needs {sorted(expected)}"
        )
    for name, shape in expected.items():
        if present[name] != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {present[name]}")


def init_attention(config: AttentionConfig, rng: np.random.Generator) -> AttentionParams:
    """Fresh weights: Glorot-uniform matrices, near-identity Cholesky factor."""
    n, d = config.width, config.head_width
    arrays: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        match name:
            case "w_q" | "w_k" | "w_v":
                arrays[name] = glorot_uniform(rng, shape, n, d)
            case "w_o":
                arrays[name] = glorot_uniform(rng, shape, d, n)
            case "w_qk" | "w_vo":
                arrays[name] = glorot_uniform(rng, shape, n, n)
            case "t_qk":
                t = n**-0.25 * np.eye(n) + np.tril(rng.normal(0.0, CHOLESKY_NOISE, size=(n, n)))
                arrays[name] = pack_lower(t)
            case "s_qk":
                arrays[name] = pack_lower(glorot_uniform(rng, (n, n), n, n))
    return AttentionParams.from_arrays(arrays)


@cache
def _tril(n: int) -> tuple[npt.NDArray[np.intp], npt.NDArray[np.intp]]:
    return np.tril_indices(n)


def pack_lower(m: Tensor) -> Tensor:
    """Row-major packed lower triangle (diagonal included) of a square matrix."""
    return m[_tril(m.shape[0])].copy()


def unpack_lower(packed: Tensor, n: int) -> Tensor:
    """Lower-triangular ``[n, n]`` matrix from its packed triangle."""
    m = np.zeros((n, n), dtype=packed.dtype)
    m[_tril(n)] = packed
    return m


def unpack_symmetric(packed: Tensor, n: int) -> Tensor:
    """Symmetric ``[n, n]`` matrix whose lower triangle is ``packed``."""
    low = unpack_lower(packed, n)
    return low + low.T - np.diag(np.diag(low))


def similarity_matrix(params: AttentionParams, config: AttentionConfig, head: int = 0) -> Tensor:
    """The ``[N, N]`` bilinear form ``M`` with ``S = x M x^T`` for one head."""
    n = config.width
    match config.qk_mode:
        case "separate":
            return params.w_q[head] @ params.w_k[head].T  # type: ignore[index]
        case "shared":
            return params.w_q[head] @ params.w_q[head].T  # type: ignore[index]
        case "collapsed":
            return params.w_qk  # type: ignore[return-value]
        case "cholesky":
            t = unpack_lower(params.t_qk, n)  # type: ignore[arg-type]
            return t @ t.T
        case "mirrored":
            return unpack_symmetric(params.s_qk, n)  # type: ignore[arg-type]
    raise VariantError(f"unknown qk_mode {config.qk_mode!r}")


def _t(a: Tensor) -> Tensor:
    return np.swapaxes(a, -1, -2)


def _flat(a: Tensor) -> Tensor:
    return a.reshape(-1, a.shape[-1])


def _check_input(x: Tensor, config: AttentionConfig) -> None:
    if x.ndim < 2 or x.shape[-1] != config.width:
        raise ShapeError(f"attention input must be [..., L, {config.width}], got {x.shape}")


def logits(x: Tensor, params: AttentionParams, config: AttentionConfig, head: int = 0) -> Tensor:
    """Similarity scores ``S[i, j] = x_i M x_j^T`` for one head.

    Args:
        x: Token embeddings ``[..., L, N]``.
        params: Weights matching ``config``.
        config: Attention variant.
        head: Head index, ``0 <= head < heads``.

    Returns:
        Scores ``[..., L, L]``.
    """
    _check_input(x, config)
    check_params(params, config)
    if not 0 <= head < config.heads:
        raise ShapeError(f"head {head} out of range for {config.heads} head(s)")
    return _logits(x, params, config, head)


def _logits(x: Tensor, params: AttentionParams, config: AttentionConfig, head: int) -> Tensor:
    n = config.width
    match config.qk_mode:
        case "separate":
            q = matmul(x, params.w_q[head])  # type: ignore[index]
            k = matmul(x, params.w_k[head])  # type: ignore[index]
            s = matmul(q, _t(k))
        case "shared":
            q = matmul(x, params.w_q[head])  # type: ignore[index]
            s = matmul(q, _t(q))
        case "cholesky":
            u = matmul(x, unpack_lower(params.t_qk, n))  # type: ignore[arg-type]
            s = matmul(u, _t(u))
        case _:
            s = matmul(matmul(x, similarity_matrix(params, config, head)), _t(x))
    if config.scale_logits:
        s = s * config.logit_scale
    return s


def causal_allowed(length: int) -> npt.NDArray[np.bool_]:
    """Mask allowing position ``i`` to see positions ``j <= i``."""
    return np.tril(np.ones((length, length), dtype=bool))


def weights(s: Tensor, mask: MaskMode = "full") -> Tensor:
    """Row-stochastic attention weights from scores ``s[..., L, L]``."""
    if mask == "causal":
        return softmax_rows(s, causal_allowed(s.shape[-1]))
    if mask == "full":
        return softmax_rows(s)
    raise VariantError(f"unknown mask {mask!r}")


@dataclass
class AttentionCache:
    """Per-head intermediates of a forward pass, reused by :func:`backward`."""

    weights: list[Tensor] = field(default_factory=list)
    values: list[Tensor] = field(default_factory=list)


def forward(x: Tensor, params: AttentionParams, config: AttentionConfig) -> Tensor:
    """Attention output ``z[..., L, N]``, summed over heads."""
    z, _ = forward_cached(x, params, config)
    return z


def forward_cached(
    x: Tensor, params: AttentionParams, config: AttentionConfig
) -> tuple[Tensor, AttentionCache]:
    """Like :func:`forward`, also returning the intermediates backward needs."""
    _check_input(x, config)
    check_params(params, config)
    cache_ = AttentionCache()
    z = np.zeros_like(x)
    for h in range(config.heads):
        a = weights(_logits(x, params, config, h), config.mask)
        cache_.weights.append(a)
        match config.vo_mode:
            case "separate":
                v = matmul(x, params.w_v[h])  # type: ignore[index]
                cache_.values.append(v)
                z = z + matmul(matmul(a, v), params.w_o[h])  # type: ignore[index]
            case "collapsed":
                z = z + matmul(matmul(a, x), params.w_vo)  # type: ignore[arg-type]
            case "identity":
                z = z + matmul(a, x)
    return ensure_finite(z, "attention.forward"), cache_


def backward(
    x: Tensor,
    params: AttentionParams,
    config: AttentionConfig,
    dz: Tensor,
    cache_: AttentionCache | None = None,
) -> tuple[Tensor, AttentionParams]:
    """Reverse-mode gradients of :func:`forward`.

    Args:
        x: The forward input ``[..., L, N]``.
        params: The forward weights.
        config: Attention variant.
        dz: Gradient of the output, shaped like ``x``.
        cache_: Intermediates from :func:`forward_cached`; recomputed if omitted.

    Returns:
        ``(dx, dparams)`` where ``dparams`` has exactly the fields of ``params``.
        Batch axes are summed into the parameter gradients.
    """
    if dz.shape != x.shape:
        raise ShapeError(f"dz shape {dz.shape} does not match input shape {x.shape}")
    if cache_ is None:
        _, cache_ = forward_cached(x, params, config)
    n = config.width
    grads: dict[str, Tensor] = {k: np.zeros_like(v) for k, v in params.arrays().items()}
    xf = _flat(x)
    dx = np.zeros_like(x)

    for h in range(config.heads):
        a = cache_.weights[h]
        match config.vo_mode:
            case "separate":
                v = cache_.values[h]
                w_v, w_o = params.w_v[h], params.w_o[h]  # type: ignore[index]
                grads["w_o"][h] += _flat(a @ v).T @ _flat(dz)
                dp = dz @ w_o.T
                da = dp @ _t(v)
                dv = _t(a) @ dp
                grads["w_v"][h] += xf.T @ _flat(dv)
                dx += dv @ w_v.T
            case "collapsed":
                w_vo = params.w_vo
                grads["w_vo"] += _flat(a @ x).T @ _flat(dz)
                dc = dz @ w_vo.T  # type: ignore[union-attr]
                da = dc @ _t(x)
                dx += _t(a) @ dc
            case _:
                da = dz @ _t(x)
                dx += _t(a) @ dz

        ds = softmax_rows_backward(a, da)
        if config.scale_logits:
            ds = ds * config.logit_scale

        match config.qk_mode:
            case "separate":
                w_q, w_k = params.w_q[h], params.w_k[h]  # type: ignore[index]
                q, k = x @ w_q, x @ w_k
                dq = ds @ k
                dk = _t(ds) @ q
                grads["w_q"][h] += xf.T @ _flat(dq)
                grads["w_k"][h] += xf.T @ _flat(dk)
                dx += dq @ w_q.T + dk @ w_k.T
            case "shared":
                w_q = params.w_q[h]  # type: ignore[index]
                q = x @ w_q
                dq = ds @ q + _t(ds) @ q
                grads["w_q"][h] += xf.T @ _flat(dq)
                dx += dq @ w_q.T
            case "cholesky":
                t = unpack_lower(params.t_qk, n)  # type: ignore[arg-type]
                u = x @ t
                du = (ds + _t(ds)) @ u
                grads["t_qk"] += pack_lower(xf.T @ _flat(du))
                dx += du @ t.T
            case "collapsed" | "mirrored":
                m = similarity_matrix(params, config, h)
                r = x @ m
                dr = ds @ x
                dm = xf.T @ _flat(dr)
                dx += _t(ds) @ r + dr @ m.T
                if config.qk_mode == "collapsed":
                    grads["w_qk"] += dm
                else:
                    grads["s_qk"] += pack_lower(dm + dm.T - np.diag(np.diag(dm)))

    return dx, AttentionParams.from_arrays(grads)


def collapse(
    params: AttentionParams,
    config: AttentionConfig,
    qk: bool = True,
    vo: bool = True,
) -> tuple[AttentionParams, AttentionConfig]:
    """Fold ``W_Q W_K^T`` into ``W_QK`` and/or ``W_V W_O`` into ``W_VO``.

    The result computes exactly the same function as the input.

    Args:
        params: Single-head weights with separate matrices.
        config: Their attention config.
        qk: Collapse the query/key pair.
        vo: Collapse the value/projection pair.

    Returns:
        The collapsed weights and the matching config.

    Raises:
        VariantError: For more than one head, or sides that are not separate.
    """
    if config.heads != 1:
        raise VariantError(f"collapse is only defined for a single head, got heads={config.heads}")
    if qk and config.qk_mode != "separate":
        raise VariantError(f"cannot collapse qk_mode={config.qk_mode}")
    if vo and config.vo_mode != "separate":
        raise VariantError(f"cannot collapse vo_mode={config.vo_mode}")
    check_params(params, config)
    arrays: dict[str, Any] = params.arrays()
    overrides: dict[str, str] = {}
    if qk:
        arrays["w_qk"] = arrays.pop("w_q")[0] @ arrays.pop("w_k")[0].T
        overrides["qk_mode"] = "collapsed"
    if vo:
        arrays["w_vo"] = arrays.pop("w_v")[0] @ arrays.pop("w_o")[0]
        overrides["vo_mode"] = "collapsed"
    new_config = AttentionConfig(
        width=config.width,
        heads=1,
        qk_mode=overrides.get("qk_mode", config.qk_mode),  # type: ignore[arg-type]
        vo_mode=overrides.get("vo_mode", config.vo_mode),  # type: ignore[arg-type]
        mask=config.mask,
        scale_logits=config.scale_logits,
    )
    logger.debug("collapsed attention %s -> %s", config, new_config)
    return AttentionParams.from_arrays(arrays), new_config
