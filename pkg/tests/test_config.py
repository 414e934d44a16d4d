import json

import pytest

from metatraffic.config import Config, apply_overrides, desk_config, load_config


def test_defaults():
    cfg = Config()
    assert (cfg.train.inner_lr, cfg.train.outer_lr) == (0.01, 0.001)
    assert cfg.train.batch_size % 6 == 0
    assert (cfg.model.memory_items, cfg.model.embed_dim) == (20, 64)
    assert cfg.tasks.periods == (1, 7, 30)
    assert (cfg.loss.c1, cfg.loss.c2, cfg.loss.c3) == (0.5, 0.2, 0.3)


def test_round_trip_through_json(tmp_path):
    cfg = desk_config()
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    back = load_config(path)
    assert back == cfg and back.digest() == cfg.digest()
    assert "lambda" in cfg.to_dict()["loss"]


@pytest.mark.parametrize(
    "key,value",
    [
        ("train.batch_size", 64),
        ("train.inner_lr", 0.0),
        ("model.memory_items", 1),
        ("model.tau", -1.0),
        ("tasks.periods", []),
    ],
)
def test_validation(key, value):
    with pytest.raises(ValueError):
        Config().replace(**{key: value})


def test_batch_divisibility_follows_task_count():
    cfg = Config().replace(**{"tasks.periods": [1], "train.batch_size": 64})
    assert cfg.train.batch_size == 64


def test_overrides_parse_by_type():
    cfg = apply_overrides(
        Config(),
        [("model.use_memory", "false"), ("train.max_epochs", "3"), ("loss.lambda", "0.5"), ("tasks.periods", "1")],
    )
    assert cfg.model.use_memory is False
    assert cfg.train.max_epochs == 3
    assert cfg.loss.margin == 0.5
    assert cfg.tasks.periods == (1,)


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(KeyError):
        apply_overrides(Config(), [("model.nope", "1")])
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"modle": {}}))
    with pytest.raises(KeyError):
        load_config(path)


def test_digest_changes_with_content():
    assert Config().digest() != Config().replace(**{"model.tau": 0.4}).digest()
