import json

import pytest

from movesynth.config import ExperimentConfig, parse_shots
from movesynth.errors import ConfigError


def test_defaults_validate_and_round_trip(tmp_path):
    cfg = ExperimentConfig().validate()
    (tmp_path / "c.json").write_text(cfg.dumps())
    back = ExperimentConfig.load(tmp_path / "c.json")
    assert back == cfg and back.dumps() == cfg.dumps()


def test_with_seed_reaches_every_section():
    cfg = ExperimentConfig().with_seed(9)
    assert {cfg.seed, cfg.data.seed, cfg.sampler.seed, cfg.pretrain.seed, cfg.meta.seed} == {9}


@pytest.mark.parametrize("doc", [
    {"data": {"height": 32}},                       # data and model resolutions disagree
    {"sampler": {"K": 10, "interval": 70}},         # task window longer than a clip
    {"bogus": {}},
    {"meta": {"nope": 1}},
    {"eval": {"shots": [1]}},
])
def test_invalid_documents(doc):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc).validate()


def test_bad_json(tmp_path):
    (tmp_path / "c.json").write_text("{")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "c.json")


def test_parse_shots():
    assert parse_shots("3,5,8,10") == [3, 5, 8, 10]
    for bad in ("", "3,x", "1"):
        with pytest.raises(ConfigError):
            parse_shots(bad)


def test_filter_section_nested(tmp_path):
    cfg = ExperimentConfig.from_dict(json.loads('{"data": {"filter": {"static_run": 7}}}'))
    assert cfg.data.filter.static_run == 7
