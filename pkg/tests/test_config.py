import pytest
from hypothesis import given, strategies as st

from ivlab.config import SEED_ENV, ConfigError, RunConfig, coerce, parse_text, resolve


def test_defaults_and_echo_have_every_key_once():
    rc = RunConfig()
    keys = [line.split("=", 1)[0] for line in rc.render().splitlines()]
    assert len(keys) == len(set(keys)) == len(rc.items())
    assert rc.scale_list == (1.0, 0.875, 0.75, 0.66)


def test_parse_text():
    got = parse_text("# comment\nsteps = 12\n\nnormalize_targets=no\nlr=1e-3\ndata=a,b\n")
    assert got == {"steps": 12, "normalize_targets": False, "lr": 1e-3, "data": "a,b"}


@pytest.mark.parametrize("text", ["bogus=1", "steps=1\nsteps=2", "steps", "steps=ten", "multi_label=maybe"])
def test_parse_errors(text):
    with pytest.raises(ConfigError):
        parse_text(text)


def test_precedence(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("seed=3\nsteps=7\n")
    assert resolve(env={SEED_ENV: "9"}).seed == 9
    assert resolve(path, env={SEED_ENV: "9"}).seed == 3
    rc = resolve(path, {"steps": "11"}, env={})
    assert (rc.seed, rc.steps) == (3, 11)
    with pytest.raises(ConfigError):
        resolve(None, {"nope": 1}, env={})


@given(st.integers(-10**6, 10**6), st.floats(allow_nan=False, allow_infinity=False))
def test_render_parse_round_trip(seed, lr):
    rc = RunConfig(seed=seed, lr=lr)
    assert resolve(None, parse_text(rc.render()), env={}) == rc
    assert coerce("seed", str(seed)) == seed


def test_digest_tracks_content():
    assert RunConfig().digest() == RunConfig().digest()
    assert RunConfig(steps=1).digest() != RunConfig().digest()
