"""Loss, metrics, the Adam optimizer, the training loop and capacity analytics."""

import logging
import time
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import numpy.typing as npt
from scipy.special import logsumexp, softmax

from pfmsoft.minformer.checkpoint import save_checkpoint
from pfmsoft.minformer.config import canonical_text, config_hash
from pfmsoft.minformer.counting import count_params
from pfmsoft.minformer.data import Dataset
from pfmsoft.minformer.encoder import (
    ModelConfig,
    ModelParams,
    initialize,
    model_backward,
    model_forward,
    model_forward_cached,
)
from pfmsoft.minformer.errors import ConfigError, NumericError, ShapeError
from pfmsoft.minformer.report import EpochRow, RunReport, save_report
from pfmsoft.minformer.tensor import DTYPES, Tensor

logger = logging.getLogger(__name__)

__all__ = [
    "AdamState",
    "EpochRow",
    "RunReport",
    "TrainConfig",
    "accuracy",
    "adam_step",
    "cross_entropy",
    "evaluate",
    "fit",
    "q_ratio",
    "train",
]

CHECKPOINT_NAME = "checkpoint.minf"
LOSS_TRACE = 8

Grads = dict[str, Tensor]


@dataclass(frozen=True)
class TrainConfig:
    """The ``train.*`` section of an experiment config.

    Adam defaults follow the Keras ones.
    """

    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    seed: int = 0
    deterministic: bool = False
    eval_every: int = 1
    precision: Literal["f64", "f32"] = "f64"
    workers: int = 1

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError(f"beta1 and beta2 must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.epsilon <= 0 or self.learning_rate <= 0:
            raise ConfigError("epsilon and learning_rate must be positive")
        if self.eval_every < 1 or self.workers < 1:
            raise ConfigError("eval_every and workers must be >= 1")


def cross_entropy(logits: Tensor, labels: npt.NDArray[np.integer]) -> tuple[float, Tensor]:
    """Mean categorical cross-entropy of softmax(logits) and its gradient.

    Returns:
        ``(loss, dlogits)`` with ``dlogits = (softmax(logits) - onehot) / B``.
    """
    b, m = logits.shape
    if labels.shape != (b,) or (b and (labels.min() < 0 or labels.max() >= m)):
        raise ShapeError(f"labels must be {b} class indices below {m}")
    rows = np.arange(b)
    loss = float(np.mean(logsumexp(logits, axis=1) - logits[rows, labels]))
    dlogits = softmax(logits, axis=1)
    dlogits[rows, labels] -= 1.0
    return loss, dlogits / b


def accuracy(logits: Tensor, labels: npt.NDArray[np.integer]) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    if len(labels) == 0:
        return 0.0
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def q_ratio(examples: int, classes: int, parameters: int) -> float:
    """Overdetermination ratio ``Q = K * M / P``."""
    if parameters <= 0:
        raise ConfigError(f"parameter count must be positive, got {parameters}")
    return examples * classes / parameters


@dataclass
class AdamState:
    """First and second moment estimates keyed like the params."""

    m: Grads = field(default_factory=dict)
    v: Grads = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: Grads) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.items()},
            v={k: np.zeros_like(a) for k, a in params.items()},
        )


def adam_step(
    params: Grads, grads: Grads, state: AdamState, t: int, cfg: TrainConfig
) -> tuple[Grads, AdamState]:
    """One bias-corrected Adam update; inputs are left untouched.

    Args:
        params: Arrays keyed by name.
        grads: Gradients with the same keys and shapes.
        state: Moments from the previous step (zeros before the first).
        t: Step number, starting at 1.
        cfg: Learning rate, betas and epsilon.

    Returns:
        The updated params and state.
    """
    if t < 1:
        raise ValueError(f"Adam step number must be >= 1, got {t}")
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ShapeError("params, grads and optimizer state must have the same keys")
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    new_params: Grads = {}
    new_state = AdamState()
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ShapeError(f"{k}: param {p.shape}, grad {g.shape}, state {state.m[k].shape}")
        m = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * (g * g)
        new_params[k] = p - cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
        new_state.m[k] = m
        new_state.v[k] = v
    return new_params, new_state


def evaluate(
    params: ModelParams, config: ModelConfig, ds: Dataset, batch_size: int = 256
) -> tuple[float, float]:
    """Mean loss and accuracy of ``params`` over a whole dataset."""
    loss_sum = 0.0
    correct = 0.0
    for start in range(0, len(ds), batch_size):
        images = ds.images[start : start + batch_size]
        labels = ds.labels[start : start + batch_size]
        logits = model_forward(images, params, config)
        loss, _ = cross_entropy(logits, labels)
        loss_sum += loss * len(labels)
        correct += accuracy(logits, labels) * len(labels)
    return loss_sum / len(ds), correct / len(ds)


@dataclass
class _ShardResult:
    loss: float
    correct: float
    grads: Grads


def _tree_sum(results: list[_ShardResult]) -> _ShardResult:
    """Sum shard results pairwise in index order."""
    while len(results) > 1:
        paired = []
        for i in range(0, len(results) - 1, 2):
            a, b = results[i], results[i + 1]
            paired.append(
                _ShardResult(a.loss + b.loss, a.correct + b.correct, {k: a.grads[k] + b.grads[k] for k in a.grads})
            )
        if len(results) % 2:
            paired.append(results[-1])
        results = paired
    return results[0]


def _batch_gradients(
    images: Tensor,
    labels: npt.NDArray[np.integer],
    params: ModelParams,
    config: ModelConfig,
    cfg: TrainConfig,
) -> _ShardResult:
    total = len(labels)

    def run(idx: npt.NDArray[np.intp]) -> _ShardResult:
        logits, cache_ = model_forward_cached(images[idx], params, config)
        loss, dlogits = cross_entropy(logits, labels[idx])
        weight = len(idx) / total
        grads = model_backward(images[idx], params, config, dlogits * weight, cache_)
        return _ShardResult(loss * weight, accuracy(logits, labels[idx]) * len(idx), grads.named_arrays())

    shards = [s for s in np.array_split(np.arange(total), min(cfg.workers, total)) if s.size]
    if len(shards) == 1:
        return run(shards[0])
    with ThreadPoolExecutor(max_workers=len(shards)) as pool:
        if cfg.deterministic:
            return _tree_sum(list(pool.map(run, shards)))
        futures = [pool.submit(run, s) for s in shards]
        acc: _ShardResult | None = None
        for future in as_completed(futures):
            r = future.result()
            acc = r if acc is None else _ShardResult(
                acc.loss + r.loss, acc.correct + r.correct, {k: acc.grads[k] + r.grads[k] for k in acc.grads}
            )
        assert acc is not None
        return acc


EpochCallback = Callable[[EpochRow], None]


def fit(
    model_config: ModelConfig,
    train_ds: Dataset,
    val_ds: Dataset | None,
    cfg: TrainConfig,
    params: ModelParams | None = None,
    on_epoch: EpochCallback | None = None,
) -> tuple[RunReport, ModelParams]:
    """Train a model and return its report together with the final params.

    Args:
        model_config: Architecture.
        train_ds: Training examples (K of them).
        val_ds: Validation examples, evaluated every ``eval_every`` epochs and
            after the last one.
        cfg: Training settings.
        params: Starting params; freshly initialized from ``model_config.seed``
            when omitted.
        on_epoch: Called with each finished epoch row.

    Raises:
        NumericError: When a minibatch loss is not finite.
    """
    if train_ds.image_shape != model_config.image_shape:
        raise ConfigError(f"dataset images {train_ds.image_shape} do not match model {model_config.image_shape}")
    if train_ds.classes != model_config.classes:
        raise ConfigError(f"dataset has {train_ds.classes} classes, model has {model_config.classes}")
    dtype = DTYPES[cfg.precision]
    if params is None:
        params = initialize(model_config, dtype=dtype)
    p = count_params(model_config).total
    q = q_ratio(len(train_ds), model_config.classes, p)
    if q < 1:
        logger.warning("overdetermination ratio Q=%.3f < 1: %d parameters for %d constraints", q, p, len(train_ds) * model_config.classes)
    sections = {"model": model_config, "train": cfg}
    report = RunReport(
        parameters=p,
        q=q,
        examples=len(train_ds),
        classes=model_config.classes,
        config_hash=config_hash(sections),
        config_text=canonical_text(sections),
    )
    images = train_ds.images.astype(dtype, copy=False)
    named = params.named_arrays()
    state = AdamState.zeros_like(named)
    step = 0
    started = time.perf_counter()
    trace: list[float] = []

    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_ds))
        loss_sum = 0.0
        correct = 0.0
        for batch, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            try:
                result = _batch_gradients(images[idx], train_ds.labels[idx], params, model_config, cfg)
            except NumericError as error:
                raise NumericError(
                    f"{error} at epoch {epoch}, batch {batch}; recent losses {trace}",
                    epoch=epoch,
                    batch=batch,
                    loss_trace=trace,
                ) from error
            trace = (trace + [result.loss])[-LOSS_TRACE:]
            if not np.isfinite(result.loss):
                raise NumericError(
                    f"non-finite loss {result.loss} at epoch {epoch}, batch {batch}; recent losses {trace}",
                    epoch=epoch,
                    batch=batch,
                    loss_trace=trace,
                )
            step += 1
            named, state = adam_step(named, result.grads, state, step, cfg)
            params = ModelParams.from_named(model_config, named)
            loss_sum += result.loss * len(idx)
            correct += result.correct

        val_loss = val_acc = None
        if val_ds is not None and len(val_ds) and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            val_loss, val_acc = evaluate(params, model_config, val_ds, cfg.batch_size)
        row = EpochRow(epoch, loss_sum / len(train_ds), val_loss, correct / len(train_ds), val_acc)
        report.rows.append(row)
        logger.info(
            "epoch %d/%d train_loss=%.4f train_acc=%.4f val_loss=%s val_acc=%s",
            epoch,
            cfg.epochs,
            row.train_loss,
            row.train_acc,
            "-" if val_loss is None else f"{val_loss:.4f}",
            "-" if val_acc is None else f"{val_acc:.4f}",
        )
        if on_epoch is not None:
            on_epoch(row)

    report.wall_clock = time.perf_counter() - started
    return report, params


def train(
    model_config: ModelConfig,
    train_ds: Dataset,
    val_ds: Dataset | None,
    cfg: TrainConfig,
    out_dir: Path | None = None,
    overwrite: bool = False,
) -> RunReport:
    """Run :func:`fit` and, given ``out_dir``, persist the report and checkpoint there."""
    report, params = fit(model_config, train_ds, val_ds, cfg)
    if out_dir is not None:
        save_report(out_dir, report, overwrite=overwrite)
        save_checkpoint(out_dir / CHECKPOINT_NAME, model_config, params, overwrite=overwrite)
    return report
