"""Tests for the loss, Adam, the training loop and the Q ratio."""

import logging
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from pfmsoft.minformer.checkpoint import load_checkpoint
from pfmsoft.minformer.counting import count_params
from pfmsoft.minformer.data import load_split, synthetic
from pfmsoft.minformer.encoder import ModelConfig, initialize, model_forward
from pfmsoft.minformer.errors import ConfigError, NumericError, ShapeError
from pfmsoft.minformer.experiment import load_experiment
from pfmsoft.minformer.report import REPORT_CSV, load_report, report_csv_text
from pfmsoft.minformer.train import (
    CHECKPOINT_NAME,
    AdamState,
    TrainConfig,
    accuracy,
    adam_step,
    cross_entropy,
    evaluate,
    fit,
    q_ratio,
    train,
)

logger = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).parents[2] / "configs"

MODEL = ModelConfig(
    image_height=8,
    image_width=8,
    channels=1,
    patch_size=4,
    width=8,
    encoders=1,
    mlp_enabled=False,
    classes=2,
)
FAST = TrainConfig(epochs=2, batch_size=8, learning_rate=0.01, deterministic=True)


@pytest.fixture(scope="module", name="blobs")
def blobs_():
    return synthetic(2, 32, image_shape=(8, 8, 1), seed=0), synthetic(2, 16, image_shape=(8, 8, 1), seed=1)


def test_uniform_logits_give_log_classes():
    loss, _ = cross_entropy(np.zeros((5, 10)), np.arange(5))
    assert loss == pytest.approx(math.log(10), abs=1e-12)
    assert loss == pytest.approx(2.3026, abs=1e-4)


def test_saturated_logits_give_zero_loss():
    logits = np.array([[50.0, 0.0, 0.0], [0.0, 0.0, 50.0]])
    loss, dlogits = cross_entropy(logits, np.array([0, 2]))
    assert loss < 1e-6
    assert np.all(np.abs(dlogits) < 1e-6)


def test_cross_entropy_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(3, 4))
    labels = np.array([1, 3, 0])
    _, analytic = cross_entropy(logits, labels)
    step = 1e-5
    numeric = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        up, down = logits.copy(), logits.copy()
        up[idx] += step
        down[idx] -= step
        numeric[idx] = (cross_entropy(up, labels)[0] - cross_entropy(down, labels)[0]) / (2 * step)
    assert np.allclose(analytic, numeric, atol=1e-7)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ShapeError):
        cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(ShapeError):
        cross_entropy(np.zeros((2, 3)), np.array([0]))


def test_accuracy():
    logits = np.array([[0.1, 0.9], [0.8, 0.2], [0.5, 0.5]])
    assert accuracy(logits, np.array([1, 0, 0])) == 1.0
    assert accuracy(logits, np.array([0, 1, 1])) == 0.0
    assert accuracy(np.zeros((0, 2)), np.zeros(0, dtype=np.int64)) == 0.0


def test_accuracy_random_labels_near_chance():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(5000, 10))
    labels = rng.integers(0, 10, size=5000)
    assert accuracy(logits, labels) == pytest.approx(0.1, abs=0.03)


def test_adam_zero_gradient_is_a_no_op():
    params = {"w": np.array([1.0, -2.0])}
    grads = {"w": np.zeros(2)}
    new, _ = adam_step(params, grads, AdamState.zeros_like(params), 1, TrainConfig())
    assert np.array_equal(new["w"], params["w"])


def test_adam_first_step_is_learning_rate():
    params = {"w": np.array([1.0, -2.0, 0.5])}
    grads = {"w": np.array([0.3, -7.0, 1e-3])}
    cfg = TrainConfig(learning_rate=1e-3)
    new, state = adam_step(params, grads, AdamState.zeros_like(params), 1, cfg)
    step = params["w"] - new["w"]
    assert np.allclose(np.abs(step), 1e-3, rtol=1e-3)
    assert np.array_equal(np.sign(step), np.sign(grads["w"]))
    assert np.allclose(state.m["w"], 0.1 * grads["w"])
    assert params["w"].tolist() == [1.0, -2.0, 0.5]


def test_adam_minimizes_a_parabola():
    cfg = TrainConfig(learning_rate=0.1)
    params = {"w": np.array([1.0])}
    state = AdamState.zeros_like(params)
    for t in range(1, 101):
        params, state = adam_step(params, {"w": 2.0 * params["w"]}, state, t, cfg)
    assert abs(params["w"][0]) < 0.5


def test_adam_checks_keys_and_step():
    params = {"w": np.zeros(2)}
    with pytest.raises(ShapeError):
        adam_step(params, {"v": np.zeros(2)}, AdamState.zeros_like(params), 1, TrainConfig())
    with pytest.raises(ShapeError):
        adam_step(params, {"w": np.zeros(3)}, AdamState.zeros_like(params), 1, TrainConfig())
    with pytest.raises(ValueError):
        adam_step(params, params, AdamState.zeros_like(params), 0, TrainConfig())


@pytest.mark.parametrize(
    ("k", "m", "p", "q"),
    [
        (60_000, 10, 279_106, 2.15),
        (60_000, 10, 92_890, 6.46),
        (60_000, 10, 26_650, 22.51),
        (50_000, 10, 287_686, 1.74),
        (50_000, 10, 35_230, 14.19),
    ],
)
def test_q_ratio_values(k, m, p, q):
    assert q_ratio(k, m, p) == pytest.approx(q, abs=0.005)


def test_q_ratio_needs_parameters():
    with pytest.raises(ConfigError):
        q_ratio(10, 2, 0)


@pytest.mark.parametrize(
    "kwargs",
    [{"epochs": 0}, {"batch_size": 0}, {"beta1": 1.0}, {"learning_rate": 0.0}, {"workers": 0}],
)
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


@pytest.mark.parametrize("lr", [1e-3, 1e-4])
def test_one_step_decreases_loss(lr, blobs):
    train_ds, _ = blobs
    images, labels = train_ds.images[:8], train_ds.labels[:8]
    cfg = replace(FAST, epochs=1, learning_rate=lr)
    report, params = fit(MODEL, train_ds.take(np.arange(8)), None, cfg)
    before, _ = cross_entropy(model_forward(images, initialize(MODEL), MODEL), labels)
    after, _ = cross_entropy(model_forward(images, params, MODEL), labels)
    assert report.rows[0].train_loss == pytest.approx(before, abs=1e-12)
    assert after < before


def test_synthetic_blobs_are_learned(blobs):
    train_ds, val_ds = blobs
    report, _ = fit(MODEL, train_ds, val_ds, replace(FAST, epochs=30))
    assert report.final.train_acc >= 0.99
    assert report.final.val_acc is not None
    assert len(report.rows) == 30
    assert [row.epoch for row in report.rows] == list(range(1, 31))


def test_report_q_matches_count(blobs):
    train_ds, _ = blobs
    report, _ = fit(MODEL, train_ds, None, replace(FAST, epochs=1))
    p = count_params(MODEL).total
    assert report.parameters == p
    assert report.q == q_ratio(len(train_ds), 2, p)
    assert report.final.val_loss is None


def test_deterministic_runs_are_identical(blobs):
    train_ds, val_ds = blobs
    first, _ = fit(MODEL, train_ds, val_ds, FAST)
    second, _ = fit(MODEL, train_ds, val_ds, FAST)
    assert report_csv_text(first) == report_csv_text(second)
    assert first.config_hash == second.config_hash


def test_deterministic_workers_agree(blobs):
    train_ds, val_ds = blobs
    cfg = replace(FAST, workers=3)
    first, params_a = fit(MODEL, train_ds, val_ds, cfg)
    second, params_b = fit(MODEL, train_ds, val_ds, cfg)
    single, _ = fit(MODEL, train_ds, val_ds, FAST)
    assert report_csv_text(first) == report_csv_text(second)
    assert np.array_equal(params_a.classifier_w, params_b.classifier_w)
    assert first.final.train_loss == pytest.approx(single.final.train_loss, rel=1e-6)


def test_eval_cadence(blobs):
    train_ds, val_ds = blobs
    report, _ = fit(MODEL, train_ds, val_ds, replace(FAST, epochs=5, eval_every=2))
    assert [row.val_loss is not None for row in report.rows] == [False, True, False, True, True]


def test_epoch_callback(blobs):
    train_ds, _ = blobs
    seen = []
    fit(MODEL, train_ds, None, FAST, on_epoch=seen.append)
    assert [row.epoch for row in seen] == [1, 2]


def test_float32_precision(blobs):
    train_ds, val_ds = blobs
    report, params = fit(MODEL, train_ds, val_ds, replace(FAST, precision="f32"))
    assert params.dtype == np.float32
    assert math.isfinite(report.final.train_loss)


def test_non_finite_loss_aborts_with_context(blobs):
    train_ds, _ = blobs
    params = initialize(MODEL)
    params.classifier_b = np.array([np.nan, 0.0])
    with pytest.raises(NumericError) as info:
        fit(MODEL, train_ds, None, FAST, params=params)
    assert info.value.epoch == 1
    assert info.value.batch == 0


def test_mismatched_dataset_is_rejected(blobs):
    train_ds, _ = blobs
    with pytest.raises(ConfigError, match="classes"):
        fit(replace(MODEL, classes=3), train_ds, None, FAST)
    with pytest.raises(ConfigError, match="images"):
        fit(replace(MODEL, image_height=4, image_width=4, patch_size=2), train_ds, None, FAST)


def test_evaluate_untrained_model(blobs):
    _, val_ds = blobs
    loss, acc = evaluate(initialize(MODEL), MODEL, val_ds, batch_size=5)
    assert 0.0 <= acc <= 1.0
    assert math.isfinite(loss)
    assert loss > 0.0


def test_train_persists_run(blobs, test_output_dir: Path):
    train_ds, val_ds = blobs
    out_dir = test_output_dir / "test_train" / "run"
    report = train(MODEL, train_ds, val_ds, FAST, out_dir=out_dir, overwrite=True)
    assert (out_dir / REPORT_CSV).read_text(encoding="utf-8") == report_csv_text(report)
    assert load_report(out_dir) == report
    config, params = load_checkpoint(out_dir / CHECKPOINT_NAME)
    assert config == MODEL
    assert params.size() == report.parameters
    with pytest.raises(FileExistsError):
        train(MODEL, train_ds, val_ds, FAST, out_dir=out_dir)


def _mnist_desk_run(config_name: str, mnist_dir: Path):
    overrides = {
        "data.dir": str(mnist_dir),
        "data.train_size": "8000",
        "data.val_size": "2000",
        "train.deterministic": "true",
    }
    experiment = load_experiment(CONFIG_DIR / config_name, overrides)
    model = experiment.model
    train_ds = load_split(experiment.data, "train", model.image_shape, model.classes)
    val_ds = load_split(experiment.data, "test", model.image_shape, model.classes)
    assert (len(train_ds), len(val_ds)) == (8000, 2000)
    report, _ = fit(model, train_ds, val_ds, experiment.train)
    return report


@pytest.mark.slow
def test_mnist_desk_scale_training(mnist_dir: Path):
    """One-head N=64 S=6 models on an 8,000/2,000 MNIST subset, 30 epochs each."""
    no_mlp = _mnist_desk_run("mnist_nomlp.cfg", mnist_dir)
    with_mlp = _mnist_desk_run("mnist_baseline.cfg", mnist_dir)
    assert len(no_mlp.rows) == 30
    assert max(row.val_acc or 0.0 for row in no_mlp.rows) >= 0.90
    assert with_mlp.final.train_loss < no_mlp.final.train_loss
