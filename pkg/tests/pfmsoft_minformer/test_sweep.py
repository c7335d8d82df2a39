"""Tests for sweep files, the standard variant lists and comparison tables."""

import logging
from dataclasses import replace
from importlib.resources import files
from pathlib import Path

import pytest

from pfmsoft.minformer.counting import count_params
from pfmsoft.minformer.encoder import ModelConfig
from pfmsoft.minformer.errors import ConfigError, DataFormatError
from pfmsoft.minformer.experiment import experiment_from_values
from pfmsoft.minformer.sweep import (
    SWEEP_CSV,
    SWEEP_TXT,
    SweepRow,
    SweepSpec,
    VariantSpec,
    load_sweep,
    modification_label,
    parse_table_csv,
    run_sweep,
    slug,
    standard_variants,
    table_csv_text,
    table_text,
)
from pfmsoft.minformer.train import q_ratio
from tests.resources import RESOURCES_ANCHOR

logger = logging.getLogger(__name__)

RESOURCES = Path(str(files(RESOURCES_ANCHOR)))
CONFIG_DIR = Path(__file__).parents[2] / "configs"

ROWS = [
    SweepRow("1H/MLP/unchanged", 1, True, "unchanged", 303_370, 1.98, 0.05, 0.08, 0.99, 0.975),
    SweepRow("1H/NoMLP/Wqk+noWv.Vo", 1, False, "Wqk+noWv.Vo", 31_426, status="failed"),
]


def test_standard_mnist_variants():
    variants = standard_variants("mnist")
    assert len(variants) == 10
    assert variants[0].name == "1H/MLP/unchanged"
    assert variants[3].settings == {
        "model.heads": "1",
        "model.mlp_enabled": "true",
        "model.qk_mode": "collapsed",
        "model.vo_mode": "identity",
    }
    assert len({v.name for v in variants}) == 10


def test_standard_cifar_variants():
    names = [v.name for v in standard_variants("cifar10")]
    assert len(names) == 9
    assert "1H/MLP/Wqk" not in names
    assert "1H/NoMLP/Wqk" in names


def test_standard_variants_unknown_dataset():
    with pytest.raises(ConfigError):
        standard_variants("imagenet")


def test_q_grows_as_parameters_shrink():
    """Smaller variants are more overdetermined on the same data."""
    counted = []
    for variant in standard_variants("mnist"):
        model = experiment_from_values(variant.settings).model
        p = count_params(model).total
        counted.append((p, q_ratio(60_000, 10, p)))
    counted.sort(reverse=True)
    qs = [q for _, q in counted]
    assert qs == sorted(qs)
    assert counted[-1][0] < counted[0][0] / 5


def test_empty_sweep_is_rejected():
    with pytest.raises(ConfigError, match="no variants"):
        SweepSpec(name="empty").validate()


def test_duplicate_names_are_rejected():
    sweep = SweepSpec(variants=[VariantSpec("a"), VariantSpec("a", {"model.heads": "2"})])
    with pytest.raises(ConfigError, match="repeats"):
        sweep.validate()


def test_invalid_member_is_named():
    sweep = SweepSpec(variants=[VariantSpec("ok"), VariantSpec("bad", {"model.heads": "4", "model.qk_mode": "cholesky"})])
    with pytest.raises(ConfigError, match="'bad'"):
        sweep.validate()


def test_member_values_layering():
    sweep = SweepSpec(
        base=str(RESOURCES / "tiny.cfg"),
        settings={"model.width": "16", "train.epochs": "3"},
        variants=[VariantSpec("v", {"model.width": "4"})],
    )
    values = sweep.member_values(sweep.variants[0], {"train.epochs": "1"})
    assert values["model.width"] == "4"
    assert values["train.epochs"] == "1"
    assert values["data.dataset"] == "synthetic"


def test_load_sweep_resolves_base():
    sweep = load_sweep(RESOURCES / "tiny_sweep.yaml")
    assert sweep.name == "tiny"
    assert Path(sweep.base or "") == RESOURCES / "tiny.cfg"
    assert [v.name for v in sweep.variants] == ["1H/NoMLP/unchanged", "1H/NoMLP/Wqk+noWv.Vo", "1H/NoMLP/cholesky"]
    assert sweep.settings == {"train.deterministic": "true"}
    assert len(sweep.validate()) == 3


@pytest.mark.parametrize(
    ("name", "count"),
    [
        ("mnist_table.yaml", 10),
        ("cifar10_table.yaml", 9),
        ("symmetric_variants.yaml", 5),
        ("mnist_depth.yaml", 8),
        ("cifar10_depth.yaml", 8),
    ],
)
def test_shipped_sweeps(name, count):
    sweep = load_sweep(CONFIG_DIR / name)
    assert len(sweep.validate()) == count


@pytest.mark.parametrize("name", ["mnist_depth.yaml", "cifar10_depth.yaml"])
def test_depth_sweeps_cover_every_combination(name):
    models = [e.model for e in load_sweep(CONFIG_DIR / name).validate()]
    assert {(m.encoders, m.heads, m.mlp_enabled) for m in models} == {
        (s, h, mlp) for s in (6, 12) for h in (1, 4) for mlp in (True, False)
    }
    for model in models:
        if model.encoders == 12:
            six, none = replace(model, encoders=6), replace(model, encoders=0)
            deep = count_params(model).total
            assert deep - count_params(six).total == count_params(six).total - count_params(none).total


def test_load_sweep_errors(test_output_dir: Path):
    directory = test_output_dir / "test_sweep" / "bad"
    directory.mkdir(parents=True, exist_ok=True)
    cases = {
        "list.yaml": "- a\n- b\n",
        "keys.yaml": "name: x\nvariantz: []\n",
        "unnamed.yaml": "variants:\n  - settings: {model.heads: 2}\n",
        "broken.yaml": "variants: [\n",
        "broken.json": "{",
    }
    for file_name, text in cases.items():
        (directory / file_name).write_text(text, encoding="utf-8")
        with pytest.raises(ConfigError):
            load_sweep(directory / file_name)


@pytest.mark.parametrize(
    ("kwargs", "label"),
    [
        ({}, "unchanged"),
        ({"qk_mode": "collapsed"}, "Wqk"),
        ({"qk_mode": "collapsed", "vo_mode": "identity"}, "Wqk+noWv.Vo"),
        ({"qk_mode": "shared"}, "symmetry"),
        ({"qk_mode": "cholesky", "vo_mode": "collapsed"}, "cholesky+Wvo"),
    ],
)
def test_modification_label(kwargs, label):
    assert modification_label(ModelConfig(**kwargs)) == label


def test_slug():
    assert slug("1H/NoMLP/Wqk+noWv.Vo") == "1H_NoMLP_Wqk+noWv.Vo"
    assert slug("///") == "variant"


def test_table_csv_round_trip():
    assert parse_table_csv(table_csv_text(ROWS)) == ROWS


def test_table_csv_header_is_checked():
    with pytest.raises(DataFormatError):
        parse_table_csv("name,q\nx,1.0\n")


def test_table_text():
    lines = table_text(ROWS).splitlines()
    assert lines[0].startswith("Variant")
    assert set(lines[1]) <= {"-", " "}
    assert "303,370" in lines[2]
    assert "97.50" in lines[2]
    assert "failed" in lines[3]
    assert len({len(line) for line in lines}) == 1


def test_run_tiny_sweep(test_output_dir: Path):
    out_dir = test_output_dir / "test_sweep" / "tiny"
    rows = run_sweep(load_sweep(RESOURCES / "tiny_sweep.yaml"), out_dir, overwrite=True)
    assert [r.status for r in rows] == ["ok", "ok", "ok"]
    assert [r.modification for r in rows] == ["unchanged", "Wqk+noWv.Vo", "cholesky"]
    assert rows[1].parameters < rows[0].parameters
    assert rows[1].q is not None and rows[0].q is not None and rows[1].q > rows[0].q
    assert parse_table_csv((out_dir / SWEEP_CSV).read_text(encoding="utf-8")) == rows
    assert (out_dir / SWEEP_TXT).is_file()
    for row in rows:
        assert (out_dir / slug(row.name) / "report.csv").is_file()


def test_failed_member_does_not_stop_the_sweep(test_output_dir: Path):
    out_dir = test_output_dir / "test_sweep" / "partial"
    sweep = load_sweep(RESOURCES / "tiny_sweep.yaml")
    sweep.variants.append(
        VariantSpec("missing-data", {"data.dataset": "mnist", "data.dir": str(out_dir / "nowhere")})
    )
    rows = run_sweep(sweep, out_dir, overwrite=True)
    assert [r.status for r in rows] == ["ok", "ok", "ok", "failed"]
    assert rows[-1].train_loss is None
    assert "failed" in (out_dir / SWEEP_TXT).read_text(encoding="utf-8")


@pytest.mark.slow
def test_run_tiny_sweep_in_processes(test_output_dir: Path):
    sweep = load_sweep(RESOURCES / "tiny_sweep.yaml")
    serial = run_sweep(sweep, test_output_dir / "test_sweep" / "serial", overwrite=True)
    parallel = run_sweep(sweep, test_output_dir / "test_sweep" / "parallel", jobs=2, overwrite=True)
    assert [r.train_loss for r in parallel] == [r.train_loss for r in serial]
