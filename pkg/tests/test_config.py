import pytest
import yaml

from library.config import RESOLVED_FILE, load_config, load_yaml, parse_overrides
from library.errors import ConfigurationError

CONFIG = """
data:
  vocab_size: 5
  duration_range: [1, 3]
model:
  num_layers: 2
  dropout_rate: 0
train:
  epochs: 3
  lam: 0.5
finetune_ce:
  initial_lr: 0.01
sweep:
  grid: [0.0, 1.0]
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(CONFIG)
    return str(path)


def test_defaults_without_file():
    config = load_config()
    joint = config.train_config("joint")
    assert (joint.optimizer, joint.initial_lr, joint.decay_factor, joint.lam) == ("sgd", 0.05, 0.8, 0.9)
    assert config.model.num_layers == 5 and config.model.hidden_per_direction == 320
    assert config.decode.beam == 12


def test_sections_and_stage_layering(config_file):
    config = load_config(config_file)
    assert config.data.vocab_size == 5
    assert config.data.duration_range == (1, 3)
    assert config.model.dropout_rate == 0.0 and isinstance(config.model.dropout_rate, float)
    ce = config.train_config("finetune_ce")
    assert (ce.stage, ce.epochs, ce.lam, ce.initial_lr) == ("finetune_ce", 3, 0.5, 0.01)
    ctc = config.train_config("finetune_ctc", epochs=7, seed=None)
    assert (ctc.epochs, ctc.initial_lr, ctc.seed) == (7, 0.05, 0)
    with pytest.raises(ConfigurationError):
        config.train_config("pretrain")


def test_overrides_win(config_file):
    overrides = parse_overrides(["--train.epochs", "9", "--model.dropout_rate=0.1", "--sweep.grid", "[0.5]"])
    assert overrides == {"train.epochs": 9, "model.dropout_rate": 0.1, "sweep.grid": [0.5]}
    config = load_config(config_file, overrides)
    assert config.train_config("joint").epochs == 9
    assert config.model.dropout_rate == 0.1
    assert config.sweep.grid == [0.5]


@pytest.mark.parametrize("args", [["train.epochs", "2"], ["--train.epochs"], ["--epochs", "2"]])
def test_malformed_overrides(args):
    with pytest.raises(ConfigurationError):
        parse_overrides(args)


@pytest.mark.parametrize("overrides", [{"train.bogus": 1}, {"nosuch.key": 1}, {"data.noise_sigma": 0.0},
                                       {"model.num_layers": 0}, {"decode.mode": "sampling"},
                                       {"finetune_ctc.lam": 2.0}])
def test_invalid_values_rejected(config_file, overrides):
    with pytest.raises(ConfigurationError):
        config = load_config(config_file, overrides)
        config.train_config("finetune_ctc")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(str(tmp_path / "absent.yaml"))


def test_resolved_config_round_trip(config_file, tmp_path):
    config = load_config(config_file)
    path = config.write_resolved(str(tmp_path / "run"))
    assert path.endswith(RESOLVED_FILE)
    assert load_yaml(path) == config.to_dict()
    assert load_config(path).to_dict() == config.to_dict()

    with_run = config.write_resolved(str(tmp_path / "run2"), {"stage": "joint"})
    with open(with_run) as stream:
        assert yaml.safe_load(stream)["run"] == {"stage": "joint"}
