import json

import pytest

from graphpurify.config import (ConfigError, RunConfig, apply_overrides, bundled_config,
                                config_from_dict, load_config, parse_override)


def test_defaults_validate():
    cfg = config_from_dict({})
    assert cfg.seeds == list(range(10))
    assert cfg.purify.t_p == 6 and cfg.diffusion.T == 50
    assert cfg.purify_config(0).t_p == 6


@pytest.mark.parametrize("name", ["smoke", "node", "graph"])
def test_bundled_configs_load(name):
    cfg = load_config(bundled_config(name))
    assert isinstance(cfg, RunConfig)


@pytest.mark.parametrize("raw, path", [
    ({"purify": {"t_p": 50}}, "purify.t_p"),
    ({"purify": {"t_p": 0}}, "purify.t_p"),
    ({"task": "edge"}, "task"),
    ({"seeds": []}, "seeds"),
    ({"seeds": [1, 1]}, "seeds"),
    ({"attack": {"budget": 1.5}}, "attack.budget"),
    ({"attack": {"name": "nettack"}}, "attack.name"),
    ({"data": {"split": [0.5, 0.5, 0.5]}}, "data.split"),
    ({"purify": {"k": 200}}, "purify.k"),
    ({"purify": {"alpha": 3.0}}, "purify.alpha"),
    ({"diffusion": {"T": 1}}, "diffusion.T"),
    ({"data": {"source": "files"}}, "data.edge_list"),
])
def test_invalid_fields_name_their_path(raw, path):
    with pytest.raises(ConfigError) as info:
        config_from_dict(raw)
    assert info.value.path == path


def test_unknown_and_mistyped_fields_are_rejected():
    with pytest.raises(ConfigError):
        config_from_dict({"purify": {"tp": 3}})
    with pytest.raises(ConfigError):
        config_from_dict({"diffusion": {"T": "many"}})


def test_overrides():
    # YAML reads "1e-3" as a string; float fields coerce it
    assert config_from_dict({}, ["purify.scale=1e-3"]).purify.scale == 1e-3
    assert parse_override("purify.guidance=false") == ("purify.guidance", False)
    raw = apply_overrides({"purify": {"t_p": 3}}, ["purify.t_p=4", ("seeds", [5])])
    assert raw == {"purify": {"t_p": 4}, "seeds": [5]}
    with pytest.raises(ConfigError):
        parse_override("novalue")
    with pytest.raises(ConfigError):
        apply_overrides({"seeds": [1]}, ["seeds.x=1"])


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    js = tmp_path / "c.json"
    js.write_text(json.dumps({"purify": {"t_p": 4}}))
    assert load_config(js).purify.t_p == 4


def test_digest_ignores_output_location():
    a = config_from_dict({"out": "x", "workers": 1})
    b = config_from_dict({"out": "y", "workers": 3})
    assert a.digest() == b.digest()
    assert a.digest() != config_from_dict({"purify": {"t_p": 5}}).digest()
    assert a.digest("data") == config_from_dict({"purify": {"t_p": 5}}).digest("data")
