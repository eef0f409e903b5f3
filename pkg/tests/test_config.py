import json

import pytest

from src.config import (
    AugmentConfig,
    DataConfig,
    Hyperparams,
    IntensityConfig,
    ModelConfig,
    ModelVariant,
    RunConfig,
    load_config,
)
from src.errors import ConfigError
from src.rotation_codecs import RepresentationKind


def write(tmp_path, payload):
    path = tmp_path / "cfg.json"
    path.write_text(payload if isinstance(payload, str) else json.dumps(payload))
    return str(path)


def test_missing_path_gives_defaults():
    cfg = load_config(None)
    assert cfg == RunConfig()
    assert cfg.train.lr == 0.00164 and cfg.train.batch_size == 9
    assert cfg.intensity.min_hu == -490.0 and cfg.intensity.max_hu == 1040.0


def test_nested_and_dotted_keys_agree(tmp_path):
    nested = load_config(write(tmp_path, {"aug": {"rot_deg": 30}, "model": {"repr": "quat"}, "seed": 9}))
    dotted = load_config(write(tmp_path, {"aug.rot_deg": 30, "model.repr": "quat", "seed": 9}))
    assert nested == dotted
    assert nested.aug.rot_deg == 30
    assert nested.model.representation is RepresentationKind.QUAT
    assert nested.seed == 9


def test_round_trip_through_json(tmp_path):
    cfg = RunConfig(
        model=ModelConfig(variant=ModelVariant.WITH_CLASS, representation=RepresentationKind.EULER),
        data=DataConfig(fold=3, imbalanced=True),
        seed=5,
    )
    assert load_config(write(tmp_path, cfg.to_dict())) == cfg


@pytest.mark.parametrize(
    "payload",
    [
        {"aug": {"rotation": 10}},
        {"optimizer": {"lr": 0.1}},
        {"train": 3},
        {"aug.p": 1.5},
        {"train": {"momentum": 1.0}},
        {"model": {"variant": "two_head"}},
        {"model": {"dtype": "float16"}},
        {"data": {"fold": 5}},
        {"intensity": {"min_hu": 100, "max_hu": 0}},
    ],
)
def test_invalid_configs(tmp_path, payload):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, payload))


def test_unreadable_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "{not json"))
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "[1, 2]"))
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.json"))


def test_overrides_replace_only_given_values():
    cfg = RunConfig().with_overrides(fold=2, representation="6dxz", workers=4)
    assert cfg.data.fold == 2
    assert cfg.model.representation is RepresentationKind.SIX_D_XZ
    assert cfg.model.variant is ModelVariant.MULTI_HEAD
    assert cfg.train.workers == 4 and cfg.train.epochs == 50
    assert RunConfig().with_overrides() == RunConfig()
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(fraction=0.0)


def test_model_shapes():
    cfg = ModelConfig()
    assert cfg.stage_dims == ((32, 32, 32), (16, 16, 16), (8, 8, 8), (4, 4, 4), (2, 2, 2), (1, 1, 1))
    assert cfg.flat_features == 64
    assert cfg.plane_size == 9 and cfg.out_size == 27
    assert cfg.n_heads == 4 and cfg.fc_in == 64
    odd = ModelConfig(variant=ModelVariant.WITH_CLASS, input_dims=(5, 4, 4), conv_channels=(2, 3))
    assert odd.stage_dims[-1] == (2, 1, 1)
    assert odd.fc_in == 6 + 4 and odd.n_heads == 1
    assert ModelConfig(representation=RepresentationKind.QUAT).out_size == 21


def test_section_validation():
    with pytest.raises(ConfigError):
        AugmentConfig(scale=(1.05, 0.95))
    with pytest.raises(ConfigError):
        IntensityConfig(y=0.5)
    with pytest.raises(ConfigError):
        Hyperparams(lr_decay=0.0)
    with pytest.raises(ConfigError):
        DataConfig(n_per_region=4)
    assert AugmentConfig(scale=[0.9, 1.1]).scale == (0.9, 1.1)
