"""Self-contained property suite behind ``minformer verify``.

Every property is checked on seeded random instances. A property fails
when any case exceeds its tolerance; the failing configs are listed in
the report.
"""

import itertools
import logging
from collections.abc import Callable, Iterator
from dataclasses import dataclass, field, replace

import numpy as np

from pfmsoft.minformer import attention as attn
from pfmsoft.minformer.attention import MASK_MODES, QK_MODES, VO_MODES, AttentionConfig
from pfmsoft.minformer.counting import count_params, enumerate_params
from pfmsoft.minformer.encoder import ModelConfig, initialize, model_backward, model_forward
from pfmsoft.minformer.errors import VariantError
from pfmsoft.minformer.tensor import Tensor

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
MAX_WIDTH = 32
MAX_LENGTH = 8
ATTENTION_GRAD_TOL = 1e-5
MODEL_GRAD_TOL = 1e-4
EXACT_TOL = 1e-12
HEAD_COUNTS = (1, 2, 4)


@dataclass
class PropertyResult:
    name: str
    tolerance: float
    cases: int = 0
    max_error: float = 0.0
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.cases > 0 and not self.failures

    def record(self, error: float, label: str) -> None:
        self.cases += 1
        self.max_error = max(self.max_error, error)
        if not error <= self.tolerance:
            self.failures.append(f"{label}: error {error:.3e}")


@dataclass
class VerifyReport:
    seed: int
    results: list[PropertyResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def text(self) -> str:
        lines = [f"verify seed={self.seed}"]
        for r in self.results:
            status = "PASS" if r.passed else "FAIL"
            lines.append(
                f"{status} {r.name:<24} cases={r.cases:<4d} max_error={r.max_error:.3e} tolerance={r.tolerance:.0e}"
            )
            lines.extend(f"    {failure}" for failure in r.failures[:10])
            if len(r.failures) > 10:
                lines.append(f"    ... {len(r.failures) - 10} more")
        lines.append("all properties passed" if self.passed else "verification FAILED")
        return "\n".join(lines) + "\n"


def relative_error(analytic: Tensor, numeric: Tensor) -> float:
    """``|a - n| / max(|a| + |n|, 1e-12)`` over a whole array."""
    scale = max(float(np.linalg.norm(analytic) + np.linalg.norm(numeric)), 1e-12)
    return float(np.linalg.norm(analytic - numeric)) / scale


def finite_difference(loss: Callable[[], float], array: Tensor, step: float = FD_STEP) -> Tensor:
    """Central-difference gradient of ``loss()`` with respect to ``array``, perturbed in place."""
    grad = np.zeros_like(array)
    flat, gflat = array.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        up = loss()
        flat[i] = original - step
        down = loss()
        flat[i] = original
        gflat[i] = (up - down) / (2 * step)
    return grad


def _inject(grads: dict[str, Tensor], fault_scale: float) -> dict[str, Tensor]:
    """Scale the largest entry of the first gradient array, for mutation checks."""
    if fault_scale == 1.0 or not grads:
        return grads
    first = next(iter(grads))
    faulty = grads[first].copy()
    idx = np.unravel_index(np.argmax(np.abs(faulty)), faulty.shape)
    faulty[idx] *= fault_scale
    return {**grads, first: faulty}


def _max_abs(a: Tensor, b: Tensor) -> float:
    return float(np.max(np.abs(a - b), initial=0.0))


def attention_configs(width: int = 8) -> Iterator[AttentionConfig]:
    """Every legal variant combination over ``HEAD_COUNTS``."""
    for qk, vo, mask, heads in itertools.product(QK_MODES, VO_MODES, MASK_MODES, HEAD_COUNTS):
        try:
            yield AttentionConfig(width=width, heads=heads, qk_mode=qk, vo_mode=vo, mask=mask)
        except VariantError:
            continue


def check_attention_gradients(
    config: AttentionConfig, rng: np.random.Generator, length: int = 4, fault_scale: float = 1.0
) -> float:
    """Worst relative error of :func:`attention.backward` against finite differences."""
    x = rng.normal(size=(length, config.width))
    params = attn.init_attention(config, rng)
    upstream = rng.normal(size=x.shape)

    def loss() -> float:
        return float(np.sum(attn.forward(x, params, config) * upstream))

    dx, dparams = attn.backward(x, params, config, upstream)
    analytic = _inject({"x": dx, **dparams.arrays()}, fault_scale)
    targets = {"x": x, **params.arrays()}
    return max(relative_error(analytic[k], finite_difference(loss, targets[k])) for k in targets)


def model_configs() -> Iterator[ModelConfig]:
    """Tiny models (N=8, S=2, L=4, M=3) covering every variant and layout option."""
    combos = [
        (qk, vo, heads)
        for qk, vo, heads in itertools.product(QK_MODES, VO_MODES, (1, 2))
        if not (heads > 1 and (qk in attn.SINGLE_HEAD_QK_MODES or vo in attn.SINGLE_HEAD_VO_MODES))
    ]
    for i, (qk, vo, heads) in enumerate(combos):
        yield ModelConfig(
            image_height=4,
            image_width=4,
            channels=1,
            patch_size=2,
            width=8,
            encoders=2,
            heads=heads,
            qk_mode=qk,  # type: ignore[arg-type]
            vo_mode=vo,  # type: ignore[arg-type]
            mask=MASK_MODES[i % 2],
            mlp_enabled=i % 3 != 2,
            mlp_multiple=2,
            classes=3,
            pooling="cls_token" if i % 4 == 2 else "mean",
            pre_norm=i % 5 != 4,
            seed=i,
        )


def check_model_gradients(
    config: ModelConfig, rng: np.random.Generator, batch: int = 2, fault_scale: float = 1.0
) -> float:
    """Worst relative error of :func:`encoder.model_backward` against finite differences."""
    images = rng.uniform(size=(batch, *config.image_shape))
    params = initialize(config)
    upstream = rng.normal(size=(batch, config.classes))

    def loss() -> float:
        return float(np.sum(model_forward(images, params, config) * upstream))

    analytic = _inject(model_backward(images, params, config, upstream).named_arrays(), fault_scale)
    return max(
        relative_error(analytic[name], finite_difference(loss, array))
        for name, array in params.named_arrays().items()
    )


def _random_separate(rng: np.random.Generator) -> tuple[AttentionConfig, Tensor]:
    n = int(rng.integers(2, MAX_WIDTH + 1))
    config = AttentionConfig(width=n, mask=MASK_MODES[int(rng.integers(2))])
    return config, rng.normal(size=(int(rng.integers(1, MAX_LENGTH + 1)), n))


def check_collapse(rng: np.random.Generator, result: PropertyResult, cases: int = 100) -> None:
    for case in range(cases):
        config, x = _random_separate(rng)
        params = attn.init_attention(config, rng)
        reference = attn.forward(x, params, config)
        for qk, vo in ((True, False), (False, True), (True, True)):
            collapsed, new_config = attn.collapse(params, config, qk=qk, vo=vo)
            error = _max_abs(attn.forward(x, collapsed, new_config), reference)
            result.record(error, f"case {case} N={config.width} qk={qk} vo={vo}")


def check_symmetry(rng: np.random.Generator, result: PropertyResult, cases: int = 100) -> None:
    for case in range(cases):
        qk = ("shared", "cholesky", "mirrored")[case % 3]
        n = int(rng.integers(2, MAX_WIDTH + 1))
        config = AttentionConfig(width=n, qk_mode=qk)  # type: ignore[arg-type]
        params = attn.init_attention(config, rng)
        s = attn.logits(rng.normal(size=(int(rng.integers(1, MAX_LENGTH + 1)), n)), params, config)
        result.record(_max_abs(s, s.T), f"case {case} qk_mode={qk} N={n}")


def check_self_similarity(rng: np.random.Generator, result: PropertyResult, cases: int = 100) -> None:
    for case in range(cases):
        n = int(rng.integers(2, MAX_WIDTH + 1))
        config = AttentionConfig(width=n, qk_mode="cholesky")
        params = attn.init_attention(config, rng)
        # Arbitrary factors, not just the near-identity initialization.
        params.t_qk = rng.normal(size=params.t_qk.shape)  # type: ignore[union-attr]
        s = attn.logits(rng.normal(scale=3.0, size=(int(rng.integers(1, MAX_LENGTH + 1)), n)), params, config)
        result.record(max(0.0, -float(np.min(np.diag(s)))), f"case {case} N={n}")


def check_row_stochastic(rng: np.random.Generator, result: PropertyResult, cases: int = 100) -> None:
    for case in range(cases):
        length = int(rng.integers(1, MAX_LENGTH + 1))
        mask = MASK_MODES[case % 2]
        a = attn.weights(rng.normal(scale=5.0, size=(length, length)), mask)
        error = float(np.max(np.abs(a.sum(axis=-1) - 1.0)))
        error = max(error, -float(np.min(a)))
        result.record(error, f"case {case} L={length} mask={mask}")


def check_convex_combination(rng: np.random.Generator, result: PropertyResult, cases: int = 100) -> None:
    for case in range(cases):
        qk = QK_MODES[case % len(QK_MODES)]
        n = int(rng.integers(2, MAX_WIDTH + 1))
        config = AttentionConfig(width=n, qk_mode=qk, vo_mode="identity", mask=MASK_MODES[case % 2])  # type: ignore[arg-type]
        params = attn.init_attention(config, rng)
        x = rng.normal(size=(int(rng.integers(1, MAX_LENGTH + 1)), n))
        z = attn.forward(x, params, config)
        a = attn.weights(attn.logits(x, params, config), config.mask)
        error = _max_abs(z, a @ x)
        below = float(np.max(x.min(axis=0) - z, initial=0.0))
        above = float(np.max(z - x.max(axis=0), initial=0.0))
        result.record(max(error, below, above), f"case {case} qk_mode={qk} N={n}")


def random_model_config(rng: np.random.Generator) -> ModelConfig:
    """A small random valid model config for counting checks."""
    heads = int(rng.choice(HEAD_COUNTS))
    single = heads == 1
    qk_choices = QK_MODES if single else tuple(m for m in QK_MODES if m not in attn.SINGLE_HEAD_QK_MODES)
    vo_choices = VO_MODES if single else tuple(m for m in VO_MODES if m not in attn.SINGLE_HEAD_VO_MODES)
    patch = int(rng.integers(1, 4))
    return ModelConfig(
        image_height=patch * int(rng.integers(1, 4)),
        image_width=patch * int(rng.integers(1, 4)),
        channels=int(rng.integers(1, 4)),
        patch_size=patch,
        width=heads * int(rng.integers(1, 5)),
        encoders=int(rng.integers(0, 4)),
        heads=heads,
        qk_mode=str(rng.choice(qk_choices)),  # type: ignore[arg-type]
        vo_mode=str(rng.choice(vo_choices)),  # type: ignore[arg-type]
        mlp_enabled=bool(rng.integers(2)),
        mlp_multiple=int(rng.integers(1, 5)),
        classes=int(rng.integers(2, 11)),
        pooling="cls_token" if rng.integers(2) else "mean",
        seed=int(rng.integers(1 << 16)),
    )


def check_counts(rng: np.random.Generator, result: PropertyResult, cases: int = 200) -> None:
    for case in range(cases):
        config = random_model_config(rng)
        closed, tallied = count_params(config), enumerate_params(initialize(config))
        mismatch = abs(closed.total - tallied.total) + sum(
            abs(closed.breakdown[k] - tallied.breakdown[k]) for k in closed.breakdown
        )
        result.record(float(mismatch), f"case {case} {config}")


def run_verification(seed: int = 0, fault_scale: float = 1.0) -> VerifyReport:
    """Run the whole property suite.

    Args:
        seed: Seeds every property's random instances.
        fault_scale: Multiplies one analytic gradient entry per gradient
            check; anything but 1.0 should make those checks fail.

    Returns:
        Per-property case counts, worst errors and failures.
    """
    report = VerifyReport(seed=seed)
    exact: list[tuple[str, Callable[[np.random.Generator, PropertyResult], None]]] = [
        ("collapse_equivalence", check_collapse),
        ("symmetry", check_symmetry),
        ("self_similarity", check_self_similarity),
        ("row_stochastic", check_row_stochastic),
        ("convex_combination", check_convex_combination),
        ("count_enumeration", check_counts),
    ]
    for index, (name, check) in enumerate(exact):
        result = PropertyResult(name, tolerance=0.0 if name == "count_enumeration" else EXACT_TOL)
        check(np.random.default_rng([seed, index]), result)
        report.results.append(result)
        logger.info("%s: %d cases, max error %.3e", name, result.cases, result.max_error)

    grads = PropertyResult("attention_gradients", tolerance=ATTENTION_GRAD_TOL)
    rng = np.random.default_rng([seed, len(exact)])
    for config in attention_configs():
        for scale_logits in (False, True):
            variant = replace(config, scale_logits=scale_logits)
            error = check_attention_gradients(variant, rng, fault_scale=fault_scale)
            grads.record(error, f"{variant}")
    report.results.append(grads)
    logger.info("attention gradients: %d cases, max error %.3e", grads.cases, grads.max_error)

    model_grads = PropertyResult("model_gradients", tolerance=MODEL_GRAD_TOL)
    rng = np.random.default_rng([seed, len(exact) + 1])
    for config in model_configs():
        model_grads.record(check_model_gradients(config, rng, fault_scale=fault_scale), f"{config}")
    report.results.append(model_grads)
    logger.info("model gradients: %d cases, max error %.3e", model_grads.cases, model_grads.max_error)
    return report
