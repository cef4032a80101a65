import configparser

import pytest

import delta
from delta.config import Config, create_default_config, load_config


def test_default_config(settings_file):
    test_config = configparser.ConfigParser()
    test_config.read(settings_file)
    for section in ["solver", "pruning", "ga", "experiment"]:
        assert section in test_config.sections()

    # expect failure if config already exists
    with pytest.raises(FileExistsError):
        create_default_config()


def test_load_config(settings_file):
    parser = configparser.ConfigParser()
    parser.read(settings_file)
    parser.set("ga", "population", "12")
    parser.set("ga", "seed_baselines", "no")
    parser.set("pruning", "t_up_factor", "3.5")
    parser.set("solver", "command", "cbc {lp} sec {timeout} solve solu {sol}")
    with open(settings_file, "w") as handle:
        parser.write(handle)

    config = load_config(settings_file)
    assert config.population == 12
    assert config.seed_baselines is False
    assert config.t_up_factor == 3.5
    assert config.solver_cmd.startswith("cbc")
    assert config.generations == Config.generations
    assert config.source_file == settings_file


@pytest.mark.parametrize(
    "section, option, value, attr",
    [
        ("ga", "population", "lots", "population"),
        ("ga", "population", "1", "population"),
        ("ga", "mutation_rate", "1.5", "mutation_rate"),
        ("pruning", "k_headroom", "-0.2", "k_headroom"),
        ("solver", "timeout_s", "forever", "timeout_s"),
    ],
)
def test_bad_values_fall_back(settings_file, caplog, section, option, value, attr):
    parser = configparser.ConfigParser()
    parser.read(settings_file)
    parser.set(section, option, value)
    with open(settings_file, "w") as handle:
        parser.write(handle)

    config = load_config(settings_file)
    assert getattr(config, attr) == getattr(Config, attr)
    assert caplog.records


def test_env_overrides_solver(settings_file, monkeypatch):
    command = "highs --model_file {lp} --solution_file {sol}"
    monkeypatch.setenv(delta.SOLVER_ENV_VAR, command)
    assert load_config(settings_file).solver_cmd.startswith("highs")


def test_missing_file_is_created(monkeypatch, tmp_path):
    target = tmp_path / "nested" / "delta.cfg"
    monkeypatch.setattr(delta.config, "CONFIG_FILE", str(target))
    config = load_config()
    assert target.exists()
    assert config.workers == 1
