"""Patch embedding, the transformer-encoder stack, and the classification head.

Per image the model computes::

    patchify -> embed (+ positions, + class token) -> S encoder layers
             -> pool -> layer norm -> classifier logits

A pre-norm encoder layer is ``u = x + Attn(LN1(x))`` followed by
``x' = u + MLP(LN2(u))`` when the MLP is enabled, else ``x' = u``. The
post-norm layout applies the norms after each residual sum instead.
The second norm belongs to the MLP sublayer and is absent without it.
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np

from pfmsoft.minformer import attention as attn
from pfmsoft.minformer.attention import AttentionConfig, AttentionParams, MaskMode, QKMode, VOMode
from pfmsoft.minformer.errors import ConfigError, ShapeError
from pfmsoft.minformer.tensor import (
    Tensor,
    ensure_finite,
    gelu,
    gelu_backward,
    glorot_uniform,
    layer_norm,
    layer_norm_backward,
    matmul,
)

logger = logging.getLogger(__name__)

Pooling = Literal["mean", "cls_token"]


@dataclass(frozen=True)
class ModelConfig:
    """Full architecture description. Parameter counts follow from it in closed form."""

    image_height: int = 28
    image_width: int = 28
    channels: int = 1
    patch_size: int = 7
    width: int = 64
    encoders: int = 6
    heads: int = 1
    qk_mode: QKMode = "separate"
    vo_mode: VOMode = "separate"
    mask: MaskMode = "full"
    scale_logits: bool = False
    mlp_enabled: bool = True
    mlp_multiple: int = 4
    classes: int = 10
    pooling: Pooling = "mean"
    pre_norm: bool = True
    norm_eps: float = 1e-6
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("image_height", "image_width", "channels", "patch_size", "mlp_multiple", "classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.encoders < 0:
            raise ConfigError(f"encoders must be >= 0, got {self.encoders}")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigError(
                f"patch_size={self.patch_size} must divide the image "
                f"{self.image_height}x{self.image_width}"
            )
        if self.pooling not in ("mean", "cls_token"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if self.norm_eps <= 0:
            raise ConfigError(f"norm_eps must be positive, got {self.norm_eps}")
        # Validates the attention variant combination.
        _ = self.attention

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(
            width=self.width,
            heads=self.heads,
            qk_mode=self.qk_mode,
            vo_mode=self.vo_mode,
            mask=self.mask,
            scale_logits=self.scale_logits,
        )

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.image_height, self.image_width, self.channels)

    @property
    def patches(self) -> int:
        """Number of patch tokens L."""
        return (self.image_height // self.patch_size) * (self.image_width // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def sequence_length(self) -> int:
        return self.patches + (1 if self.pooling == "cls_token" else 0)

    @property
    def hidden_width(self) -> int:
        return self.mlp_multiple * self.width


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class MLPParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class EncoderParams:
    attention: AttentionParams
    norm1: NormParams
    norm2: NormParams | None = None
    mlp: MLPParams | None = None


@dataclass
class ModelParams:
    """All learnable arrays of a model. Gradients use the same type."""

    patch_w: Tensor
    patch_b: Tensor
    position: Tensor
    head_norm: NormParams
    classifier_w: Tensor
    classifier_b: Tensor
    cls_token: Tensor | None = None
    encoders: list[EncoderParams] = field(default_factory=list)

    def named_arrays(self) -> dict[str, Tensor]:
        """Every array keyed by its manifest name, in manifest order."""
        out: dict[str, Tensor] = {
            "embed.w": self.patch_w,
            "embed.b": self.patch_b,
            "embed.position": self.position,
        }
        if self.cls_token is not None:
            out["embed.cls_token"] = self.cls_token
        for i, enc in enumerate(self.encoders):
            prefix = f"encoder.{i}"
            for name, value in enc.attention.arrays().items():
                out[f"{prefix}.attention.{name}"] = value
            out[f"{prefix}.norm1.gamma"] = enc.norm1.gamma
            out[f"{prefix}.norm1.beta"] = enc.norm1.beta
            if enc.mlp is not None and enc.norm2 is not None:
                out[f"{prefix}.norm2.gamma"] = enc.norm2.gamma
                out[f"{prefix}.norm2.beta"] = enc.norm2.beta
                out[f"{prefix}.mlp.w1"] = enc.mlp.w1
                out[f"{prefix}.mlp.b1"] = enc.mlp.b1
                out[f"{prefix}.mlp.w2"] = enc.mlp.w2
                out[f"{prefix}.mlp.b2"] = enc.mlp.b2
        out["head.norm.gamma"] = self.head_norm.gamma
        out["head.norm.beta"] = self.head_norm.beta
        out["head.w"] = self.classifier_w
        out["head.b"] = self.classifier_b
        return out

    @classmethod
    def from_named(cls, config: ModelConfig, arrays: dict[str, Tensor]) -> "ModelParams":
        """Rebuild params from a manifest-keyed mapping, checking names and shapes."""
        expected = model_param_shapes(config)
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ShapeError(f"parameter names do not match config: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if arrays[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {arrays[name].shape}")
        encoders = []
        for i in range(config.encoders):
            prefix = f"encoder.{i}"
            att = {
                name.rsplit(".", 1)[1]: value
                for name, value in arrays.items()
                if name.startswith(f"{prefix}.attention.")
            }
            enc = EncoderParams(
                attention=AttentionParams.from_arrays(att),
                norm1=NormParams(arrays[f"{prefix}.norm1.gamma"], arrays[f"{prefix}.norm1.beta"]),
            )
            if config.mlp_enabled:
                enc.norm2 = NormParams(arrays[f"{prefix}.norm2.gamma"], arrays[f"{prefix}.norm2.beta"])
                enc.mlp = MLPParams(
                    arrays[f"{prefix}.mlp.w1"],
                    arrays[f"{prefix}.mlp.b1"],
                    arrays[f"{prefix}.mlp.w2"],
                    arrays[f"{prefix}.mlp.b2"],
                )
            encoders.append(enc)
        return cls(
            patch_w=arrays["embed.w"],
            patch_b=arrays["embed.b"],
            position=arrays["embed.position"],
            cls_token=arrays.get("embed.cls_token"),
            encoders=encoders,
            head_norm=NormParams(arrays["head.norm.gamma"], arrays["head.norm.beta"]),
            classifier_w=arrays["head.w"],
            classifier_b=arrays["head.b"],
        )

    def map(self, config: ModelConfig, fn: Callable[[str, Tensor], Tensor]) -> "ModelParams":
        """A new ModelParams with ``fn(name, array)`` applied to every array."""
        return ModelParams.from_named(config, {k: fn(k, v) for k, v in self.named_arrays().items()})

    def size(self) -> int:
        return sum(int(a.size) for a in self.named_arrays().values())

    @property
    def dtype(self) -> np.dtype[Any]:
        return self.patch_w.dtype


def component_of(name: str) -> str:
    """Breakdown component a manifest name belongs to."""
    if name in ("embed.w", "embed.b"):
        return "embedding"
    if name == "embed.position":
        return "positional"
    if name == "embed.cls_token":
        return "class_token"
    if ".attention." in name:
        return "attention"
    if ".mlp." in name:
        return "mlp"
    if ".norm" in name or name.startswith("head.norm"):
        return "norms"
    return "head"


def model_param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Manifest names and shapes of every array of ``config``, in order."""
    n, m, hid = config.width, config.classes, config.hidden_width
    shapes: dict[str, tuple[int, ...]] = {
        "embed.w": (config.patch_dim, n),
        "embed.b": (n,),
        "embed.position": (config.patches, n),
    }
    if config.pooling == "cls_token":
        shapes["embed.cls_token"] = (n,)
    for i in range(config.encoders):
        prefix = f"encoder.{i}"
        for name, shape in attn.param_shapes(config.attention).items():
            shapes[f"{prefix}.attention.{name}"] = shape
        shapes[f"{prefix}.norm1.gamma"] = (n,)
        shapes[f"{prefix}.norm1.beta"] = (n,)
        if config.mlp_enabled:
            shapes[f"{prefix}.norm2.gamma"] = (n,)
            shapes[f"{prefix}.norm2.beta"] = (n,)
            shapes[f"{prefix}.mlp.w1"] = (n, hid)
            shapes[f"{prefix}.mlp.b1"] = (hid,)
            shapes[f"{prefix}.mlp.w2"] = (hid, n)
            shapes[f"{prefix}.mlp.b2"] = (n,)
    shapes["head.norm.gamma"] = (n,)
    shapes["head.norm.beta"] = (n,)
    shapes["head.w"] = (n, m)
    shapes["head.b"] = (m,)
    return shapes


def _norm(n: int) -> NormParams:
    return NormParams(gamma=np.ones(n), beta=np.zeros(n))


def initialize(config: ModelConfig, dtype: Any = np.float64) -> ModelParams:
    """Seeded fresh params: Glorot-uniform matrices, zero biases, unit gammas.

    The class token is a Glorot draw too, never a constant row: a constant
    row reaches the first pre-norm layer norm with zero variance.
    """
    rng = np.random.default_rng(config.seed)
    n, m, hid = config.width, config.classes, config.hidden_width
    encoders = []
    for _ in range(config.encoders):
        enc = EncoderParams(attention=attn.init_attention(config.attention, rng), norm1=_norm(n))
        if config.mlp_enabled:
            enc.norm2 = _norm(n)
            enc.mlp = MLPParams(
                w1=glorot_uniform(rng, (n, hid), n, hid),
                b1=np.zeros(hid),
                w2=glorot_uniform(rng, (hid, n), hid, n),
                b2=np.zeros(n),
            )
        encoders.append(enc)
    params = ModelParams(
        patch_w=glorot_uniform(rng, (config.patch_dim, n), config.patch_dim, n),
        patch_b=np.zeros(n),
        position=glorot_uniform(rng, (config.patches, n), config.patches, n),
        cls_token=glorot_uniform(rng, (n,), 1, n) if config.pooling == "cls_token" else None,
        encoders=encoders,
        head_norm=_norm(n),
        classifier_w=glorot_uniform(rng, (n, m), n, m),
        classifier_b=np.zeros(m),
    )
    if np.dtype(dtype) != np.float64:
        params = params.map(config, lambda _, a: a.astype(dtype))
    logger.debug("initialized %d parameters (seed=%d)", params.size(), config.seed)
    return params


def patchify(images: Tensor, p: int) -> Tensor:
    """Cut images into flattened ``p x p`` patches.

    Args:
        images: One image ``[H, W, C]`` or a batch ``[B, H, W, C]``.
        p: Patch edge length; must divide ``H`` and ``W``.

    Returns:
        ``[L, p*p*C]`` (or ``[B, L, p*p*C]``) with ``L = (H/p)(W/p)``. Patches
        follow a raster scan of the patch grid; within a patch, pixels are in
        raster order with channels innermost.
    """
    single = images.ndim == 3
    batch = images[None] if single else images
    if batch.ndim != 4:
        raise ShapeError(f"patchify expects [H, W, C] or [B, H, W, C], got {images.shape}")
    b, h, w, c = batch.shape
    if h % p or w % p:
        raise ConfigError(f"patch size {p} does not divide image {h}x{w}")
    tokens = (
        batch.reshape(b, h // p, p, w // p, p, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, (h // p) * (w // p), p * p * c)
    )
    return tokens[0] if single else tokens


def unpatchify(tokens: Tensor, image_shape: tuple[int, int, int], p: int) -> Tensor:
    """Inverse of :func:`patchify` for ``[L, p*p*C]`` or ``[B, L, p*p*C]``."""
    single = tokens.ndim == 2
    batch = tokens[None] if single else tokens
    h, w, c = image_shape
    b = batch.shape[0]
    images = (
        batch.reshape(b, h // p, w // p, p, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)
    )
    return images[0] if single else images


def mlp_forward(z: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Single-hidden-layer MLP ``gelu(z W1 + b1) W2 + b2`` applied per token."""
    return matmul(gelu(matmul(z, w1) + b1), w2) + b2


def mlp_backward(z: Tensor, mlp: MLPParams, dy: Tensor) -> tuple[Tensor, MLPParams]:
    """Gradients of :func:`mlp_forward` with respect to ``z`` and the weights."""
    pre = z @ mlp.w1 + mlp.b1
    hidden = gelu(pre)
    dhidden = dy @ mlp.w2.T
    dpre = gelu_backward(pre, dhidden)
    grads = MLPParams(
        w1=_flat(z).T @ _flat(dpre),
        b1=_flat(dpre).sum(axis=0),
        w2=_flat(hidden).T @ _flat(dy),
        b2=_flat(dy).sum(axis=0),
    )
    return dpre @ mlp.w1.T, grads


def _flat(a: Tensor) -> Tensor:
    return a.reshape(-1, a.shape[-1])


@dataclass
class _LayerCache:
    x: Tensor
    attn_in: Tensor
    attn_cache: attn.AttentionCache
    residual: Tensor
    mlp_in: Tensor | None = None
    mlp_out: Tensor | None = None


@dataclass
class ForwardCache:
    """Intermediates of :func:`model_forward_cached` consumed by :func:`model_backward`."""

    tokens: Tensor
    layers: list[_LayerCache]
    final: Tensor
    pooled: Tensor
    head_in: Tensor


def _check_images(images: Tensor, config: ModelConfig) -> None:
    if images.ndim != 4 or images.shape[1:] != config.image_shape:
        raise ShapeError(f"expected images [B, {', '.join(map(str, config.image_shape))}], got {images.shape}")


def _layer_forward(x: Tensor, enc: EncoderParams, config: ModelConfig) -> tuple[Tensor, _LayerCache]:
    eps = config.norm_eps
    if config.pre_norm:
        attn_in = layer_norm(x, enc.norm1.gamma, enc.norm1.beta, eps)
        z, att_cache = attn.forward_cached(attn_in, enc.attention, config.attention)
        u = x + z
        cache_ = _LayerCache(x=x, attn_in=attn_in, attn_cache=att_cache, residual=u)
        if enc.mlp is None or enc.norm2 is None:
            return u, cache_
        cache_.mlp_in = layer_norm(u, enc.norm2.gamma, enc.norm2.beta, eps)
        y = mlp_forward(cache_.mlp_in, enc.mlp.w1, enc.mlp.b1, enc.mlp.w2, enc.mlp.b2)
        return u + y, cache_
    z, att_cache = attn.forward_cached(x, enc.attention, config.attention)
    u_pre = x + z
    u = layer_norm(u_pre, enc.norm1.gamma, enc.norm1.beta, eps)
    cache_ = _LayerCache(x=x, attn_in=x, attn_cache=att_cache, residual=u_pre, mlp_in=u)
    if enc.mlp is None or enc.norm2 is None:
        return u, cache_
    cache_.mlp_out = u + mlp_forward(u, enc.mlp.w1, enc.mlp.b1, enc.mlp.w2, enc.mlp.b2)
    return layer_norm(cache_.mlp_out, enc.norm2.gamma, enc.norm2.beta, eps), cache_


def _layer_backward(
    dout: Tensor, enc: EncoderParams, cache_: _LayerCache, config: ModelConfig
) -> tuple[Tensor, EncoderParams]:
    eps = config.norm_eps
    grads = EncoderParams(attention=AttentionParams(), norm1=NormParams(np.empty(0), np.empty(0)))
    if config.pre_norm:
        du = dout
        if enc.mlp is not None and enc.norm2 is not None:
            dmlp_in, grads.mlp = mlp_backward(cache_.mlp_in, enc.mlp, dout)  # type: ignore[arg-type]
            dln, dg, db = layer_norm_backward(cache_.residual, enc.norm2.gamma, dmlp_in, eps)
            grads.norm2 = NormParams(dg, db)
            du = du + dln
        dattn_in, grads.attention = attn.backward(
            cache_.attn_in, enc.attention, config.attention, du, cache_.attn_cache
        )
        dln, dg, db = layer_norm_backward(cache_.x, enc.norm1.gamma, dattn_in, eps)
        grads.norm1 = NormParams(dg, db)
        return du + dln, grads
    du = dout
    if enc.mlp is not None and enc.norm2 is not None:
        dsum, dg, db = layer_norm_backward(cache_.mlp_out, enc.norm2.gamma, dout, eps)  # type: ignore[arg-type]
        grads.norm2 = NormParams(dg, db)
        dmlp_in, grads.mlp = mlp_backward(cache_.mlp_in, enc.mlp, dsum)  # type: ignore[arg-type]
        du = dsum + dmlp_in
    du_pre, dg, db = layer_norm_backward(cache_.residual, enc.norm1.gamma, du, eps)
    grads.norm1 = NormParams(dg, db)
    dx, grads.attention = attn.backward(cache_.x, enc.attention, config.attention, du_pre, cache_.attn_cache)
    return du_pre + dx, grads


def model_forward(images: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    """Class logits ``[B, M]`` for a batch of images ``[B, H, W, C]``."""
    logits, _ = model_forward_cached(images, params, config)
    return logits


def model_forward_cached(
    images: Tensor, params: ModelParams, config: ModelConfig
) -> tuple[Tensor, ForwardCache]:
    """Like :func:`model_forward`, also returning the intermediates for backward."""
    _check_images(images, config)
    tokens = patchify(images.astype(params.dtype, copy=False), config.patch_size)
    x = matmul(tokens, params.patch_w) + params.patch_b + params.position
    if params.cls_token is not None:
        cls = np.broadcast_to(params.cls_token, (x.shape[0], 1, config.width))
        x = np.concatenate([cls, x], axis=1)
    layers = []
    for enc in params.encoders:
        x, layer_cache = _layer_forward(x, enc, config)
        layers.append(layer_cache)
    pooled = x[:, 0] if config.pooling == "cls_token" else x.mean(axis=1)
    head_in = layer_norm(pooled, params.head_norm.gamma, params.head_norm.beta, config.norm_eps)
    logits = matmul(head_in, params.classifier_w) + params.classifier_b
    ensure_finite(logits, "model_forward")
    return logits, ForwardCache(tokens=tokens, layers=layers, final=x, pooled=pooled, head_in=head_in)


def model_backward(
    images: Tensor,
    params: ModelParams,
    config: ModelConfig,
    dlogits: Tensor,
    cache_: ForwardCache | None = None,
) -> ModelParams:
    """Gradient of every parameter given the gradient of the logits.

    Args:
        images: The forward batch ``[B, H, W, C]``.
        params: The forward params.
        config: Model architecture.
        dlogits: Gradient of the loss with respect to the logits, ``[B, M]``.
        cache_: Intermediates from :func:`model_forward_cached`; recomputed if omitted.

    Returns:
        Gradients with exactly the arrays ``params`` holds, summed over the batch.
    """
    if cache_ is None:
        _, cache_ = model_forward_cached(images, params, config)
    if dlogits.shape != (images.shape[0], config.classes):
        raise ShapeError(f"dlogits must be [{images.shape[0]}, {config.classes}], got {dlogits.shape}")
    grads: dict[str, Tensor] = {
        "head.w": cache_.head_in.T @ dlogits,
        "head.b": dlogits.sum(axis=0),
    }
    dhead_in = dlogits @ params.classifier_w.T
    dpooled, grads["head.norm.gamma"], grads["head.norm.beta"] = layer_norm_backward(
        cache_.pooled, params.head_norm.gamma, dhead_in, config.norm_eps
    )
    dx = np.zeros_like(cache_.final)
    if config.pooling == "cls_token":
        dx[:, 0] = dpooled
    else:
        dx += dpooled[:, None, :] / dx.shape[1]

    encoder_grads: list[EncoderParams] = []
    for enc, layer_cache in zip(reversed(params.encoders), reversed(cache_.layers), strict=True):
        dx, enc_grads = _layer_backward(dx, enc, layer_cache, config)
        encoder_grads.append(enc_grads)
    encoder_grads.reverse()
    for i, enc_grads in enumerate(encoder_grads):
        prefix = f"encoder.{i}"
        for name, value in enc_grads.attention.arrays().items():
            grads[f"{prefix}.attention.{name}"] = value
        grads[f"{prefix}.norm1.gamma"] = enc_grads.norm1.gamma
        grads[f"{prefix}.norm1.beta"] = enc_grads.norm1.beta
        if enc_grads.mlp is not None and enc_grads.norm2 is not None:
            grads[f"{prefix}.norm2.gamma"] = enc_grads.norm2.gamma
            grads[f"{prefix}.norm2.beta"] = enc_grads.norm2.beta
            grads[f"{prefix}.mlp.w1"] = enc_grads.mlp.w1
            grads[f"{prefix}.mlp.b1"] = enc_grads.mlp.b1
            grads[f"{prefix}.mlp.w2"] = enc_grads.mlp.w2
            grads[f"{prefix}.mlp.b2"] = enc_grads.mlp.b2

    if params.cls_token is not None:
        grads["embed.cls_token"] = dx[:, 0].sum(axis=0)
        dx = dx[:, 1:]
    grads["embed.position"] = dx.sum(axis=0)
    grads["embed.w"] = _flat(cache_.tokens).T @ _flat(dx)
    grads["embed.b"] = _flat(dx).sum(axis=0)
    return ModelParams.from_named(config, grads)
