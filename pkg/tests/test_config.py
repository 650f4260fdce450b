import pytest

from reppoints import config as C
from reppoints.model import ModelConfig
from reppoints.pipeline import TrainConfig


def test_defaults_cover_every_section():
    cfg = C.defaults()
    for name in C.SECTIONS:
        assert any(k.startswith(name + ".") for k in cfg)
    assert "train.seed" not in cfg and cfg["run.seed"] == 0


def test_build_uses_dataclass_defaults():
    cfg = C.defaults()
    assert C.build(cfg, "model") == ModelConfig()
    assert C.build(cfg, "train") == TrainConfig()


def test_run_seed_feeds_train_seed():
    cfg = C.load_config(seed=7)
    assert C.build(cfg, "train").seed == 7


@pytest.mark.parametrize("raw,key,value", [
    ("model.converter=moment", "model.converter", "moment"),
    ("train.iterations = 12", "train.iterations", 12),
    ("train.lr=0.5", "train.lr", 0.5),
    ("train.flip=false", "train.flip", False),
    ("model.rec_feedback=0", "model.rec_feedback", False),
    ("train.lr_steps=10, 20", "train.lr_steps", (10, 20)),
    ("train.lr_steps=", "train.lr_steps", ()),
])
def test_typed_overrides(raw, key, value):
    assert C.load_config(overrides=[raw])[key] == value


def test_unknown_key_rejected():
    with pytest.raises(C.ConfigError, match="unknown key 'model.colour'"):
        C.load_config(overrides=["model.colour=red"])


def test_bad_type_rejected():
    with pytest.raises(C.ConfigError, match="train.iterations"):
        C.load_config(overrides=["train.iterations=many"])


def test_missing_equals_rejected():
    with pytest.raises(C.ConfigError):
        C.load_config(overrides=["train.iterations"])


def test_invalid_value_rejected():
    with pytest.raises(C.ConfigError, match="model.converter"):
        C.load_config(overrides=["model.converter=hull"])
    with pytest.raises(C.ConfigError, match="train"):
        C.load_config(overrides=["train.iterations=0"])


def test_file_with_comments_and_line_numbers(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# toy run\ntrain.iterations = 5  # short\n\nmodel.converter = moment\n")
    cfg = C.load_config(path)
    assert cfg["train.iterations"] == 5 and cfg["model.converter"] == "moment"
    path.write_text("train.iterations = 5\nbogus.key = 1\n")
    with pytest.raises(C.ConfigError, match=r"run.cfg:2"):
        C.load_config(path)


def test_missing_file(tmp_path):
    with pytest.raises(C.ConfigError, match="not found"):
        C.load_config(tmp_path / "nope.cfg")


def test_overrides_win_over_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("train.iterations = 5\n")
    assert C.load_config(path, ["train.iterations=9"])["train.iterations"] == 9


def test_formatted_config_round_trips():
    cfg = C.load_config(overrides=["model.converter=partial_minmax", "train.lr_steps=3,4", "data.dir=/x y"],
                        seed=3)
    text = C.format_config(cfg)
    assert C.parse_config_text(text) == cfg
    assert text.splitlines() == sorted(text.splitlines())


def test_snapshot_round_trip():
    cfg = C.load_config(overrides=["train.lr_steps=3,4"])
    assert C.from_snapshot(C.to_snapshot(cfg)) == cfg
    with pytest.raises(C.ConfigError):
        C.from_snapshot({"nope": 1})
