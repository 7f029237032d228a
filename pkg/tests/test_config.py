from dataclasses import fields

import pytest
from hypothesis import given, settings, strategies as st

from notedx.config import RunConfig, format_value, load_config, parse_config, save_config
from notedx.errors import ConfigError


def test_defaults():
    c = RunConfig()
    assert c.embed_dim == 128
    assert c.filters == ((3, 64), (4, 64), (5, 64))
    assert c.p_keep == 0.5 and c.lr == 1e-4
    assert c.ratios == (0.70, 0.15, 0.15)
    assert len(c.seeds) == 5
    assert c.min_count == 2 and c.top_k == 10


def test_parse_types():
    c = parse_config(
        """
        # comment
        seeds = 3, 4
        filters = 2x8,3x16
        p_keep = 0.8
        deterministic = yes
        baselines = logreg
        corpus = data/notes.jsonl
        """
    )
    assert c.seeds == (3, 4)
    assert c.filters == ((2, 8), (3, 16))
    assert c.p_keep == 0.8
    assert c.deterministic is True
    assert c.baselines == ("logreg",)
    assert c.corpus == "data/notes.jsonl"


@pytest.mark.parametrize(
    "text",
    ["colour = red", "lr = fast", "deterministic = maybe", "no equals sign", "lr = 1\nlr = 2", " = 3"],
)
def test_rejects(text):
    with pytest.raises(ConfigError):
        parse_config(text)


@pytest.mark.parametrize(
    "changes",
    [dict(seeds=()), dict(ratios=(0.5, 0.5, 0.1)), dict(baselines=("svm",)), dict(p_keep=0.0), dict(seeds=(1, 1))],
)
def test_validate(changes):
    with pytest.raises(ConfigError):
        RunConfig(**changes).validate()


def test_text_round_trip(tmp_path):
    c = RunConfig(seeds=(7, 9), filters=((2, 5),), sg_lr=0.0125, corpus="x.jsonl", deterministic=True)
    save_config(c, tmp_path / "run.cfg")
    assert load_config(tmp_path / "run.cfg") == c


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")


def test_hash_stable():
    assert RunConfig().config_hash() == RunConfig().config_hash()
    assert parse_config("lr = 0.0001").config_hash() == RunConfig().config_hash()


def _changed(c, name):
    v = getattr(c, name)
    if isinstance(v, bool):
        return not v
    if isinstance(v, int):
        return v + 1
    if isinstance(v, float):
        return v * 0.5
    if isinstance(v, str):
        return v + "x"
    if name == "filters":
        return v + ((7, 1),)
    return v[:-1]


@settings(max_examples=60, deadline=None)
@given(st.sampled_from([f.name for f in fields(RunConfig)]))
def test_hash_changes_with_any_field(name):
    c = RunConfig()
    d = c.with_overrides(**{name: _changed(c, name)})
    assert d.config_hash() != c.config_hash()
    assert parse_config(d.to_text()) == d


def test_format_value():
    assert format_value(True) == "true"
    assert format_value(((3, 64), (4, 64))) == "3x64,4x64"
    assert format_value((0.7, 0.15, 0.15)) == "0.7,0.15,0.15"
