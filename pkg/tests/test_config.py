import pytest
import yaml

from navit.config import RunConfig, dump_config, load_config, parse_config
from navit.errors import ConfigError


def test_defaults_are_valid_and_round_trip():
    config = RunConfig().validate()
    assert parse_config(dump_config(config)) == config


def test_empty_file_gives_defaults():
    assert parse_config("") == RunConfig()


@pytest.mark.parametrize("text, path", [
    ("bogus: 1", "bogus"),
    ("train: {stepz: 3}", "train.stepz"),
    ("dataset: {ratio_law: {kind: lognormal, a: 0, c: 1}}", "dataset.ratio_law.c"),
    ("packing: {seq_len: many}", "packing.seq_len"),
    ("packing: {seq_len: 0}", "packing.seq_len"),
    ("model: {heads: 3}", "model.heads"),
    ("model: {posemb: learned3d}", "model.posemb"),
    ("sampler: {mode: diagonal}", "sampler.mode"),
    ("drop: {kind: constant, rate: 1.5}", "drop.rate"),
    ("eval: {analyses: [everything]}", "eval.analyses"),
    ("eval: {cascade_budgets: [25, 9]}", "eval.cascade_budgets"),
    ("train: 5", "train"),
    ("seed: -1", "seed"),
    ("dataset: {area_law: {kind: uniform, a: 5, b: 1}}", "dataset.area_law"),
])
def test_errors_name_the_field(text, path):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.path == path
    assert path in str(info.value)


def test_invalid_yaml():
    with pytest.raises(ConfigError):
        parse_config("train: [unclosed")


def test_booleans_are_not_integers():
    with pytest.raises(ConfigError):
        parse_config("train: {steps: true}")


def test_overrides(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"seed": 3, "model": {"width": 16}}))
    config = load_config(path)
    assert config.seed == 3 and config.model.width == 16
    over = config.with_overrides(seed=9, precision="double", out_dir=tmp_path / "o")
    assert (over.seed, over.model.precision, over.out_dir) == (9, "double", str(tmp_path / "o"))


def test_missing_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")
