import json

import pytest

from quantdrift.config import parse_config
from quantdrift.errors import ConfigError
from quantdrift.prediction import DEFAULT_SWEEP


def test_empty_document_needs_family():
    with pytest.raises(ConfigError) as err:
        parse_config("")
    assert err.value.path == "family"


def test_tent_defaults():
    run = parse_config('{"family":{"kind":"tent"}}')
    assert run.family.horizon == 64
    assert (run.prior.lower, run.prior.upper, run.prior.bins) == (0.0, 2.0, 64)
    assert run.counts.grid_resolution == 16384
    assert run.family.state_bins == 1024
    assert run.sweep == DEFAULT_SWEEP
    assert run.seeds == (0,)


def test_negative_sigma_rejected():
    with pytest.raises(ConfigError) as err:
        parse_config('{"family":{"kind":"tent"},"kernel":{"sigma":-0.1}}')
    assert err.value.path == "kernel.sigma"


@pytest.mark.parametrize("doc,path", [
    ({"family": {"kind": "tent"}, "colour": 1}, "colour"),
    ({"family": {"kind": "tent", "hroizon": 3}}, "family.hroizon"),
    ({"family": {"kind": "tent"}, "kernel": {"sigmaa": 0.1}}, "kernel.sigmaa"),
    ({"family": {"kind": "tent"}, "counts": {"samples": 3}}, "counts.samples"),
])
def test_unknown_fields_named(doc, path):
    with pytest.raises(ConfigError) as err:
        parse_config(json.dumps(doc))
    assert err.value.path == path


@pytest.mark.parametrize("doc", [
    {"family": {"kind": "tnet"}},
    {"family": {"kind": "tent"}, "seeds": []},
    {"family": {"kind": "tent"}, "sweep": [0.1, -1]},
    {"family": {"kind": "tent"}, "prior": {"density": [0.5, 0.6]}},
    {"family": {"kind": "tent"}, "recovery_rule": "median"},
    {"family": {"kind": "tent", "horizon": "64"}},
])
def test_invalid_values(doc):
    with pytest.raises(ConfigError):
        parse_config(json.dumps(doc))


def test_invalid_json():
    with pytest.raises(ConfigError):
        parse_config("{not json")


def test_full_document_and_echo():
    doc = {"family": {"kind": "pendulum", "pendulum": {"m1": 2.0}}, "prior": {"bins": 20},
           "kernel": {"sigma": 0.02, "coordinate_bounds": [0, 1]}, "seeds": [1, 2],
           "mitigation": {"method": "reweight"}}
    run = parse_config(json.dumps(doc))
    assert run.family.pendulum.m1 == 2.0 and run.prior.bins == 20 and run.seed == 1
    assert run.kernel.coordinate_bounds == (0.0, 1.0)
    echo = run.to_dict()
    assert echo["kernel"]["coordinate_bounds"] == [0.0, 1.0]
    json.dumps(echo)


def test_output_dir_env(monkeypatch):
    monkeypatch.setenv("QUANTDRIFT_OUTPUT", "/tmp/somewhere")
    assert parse_config('{"family":{"kind":"tent"}}').output_dir == "/tmp/somewhere"
