from dataclasses import dataclass, field

import pytest

from vase import config
from vase.config import ConfigError
from vase.trainer import TrainConfig


@dataclass(frozen=True)
class Inner:
    rate: float = 0.5
    sizes: tuple[int, ...] = (32,)
    on: bool = False


@dataclass(frozen=True)
class Outer:
    name: str = "a"
    count: int = 3
    inner: Inner = field(default_factory=Inner)


class TestParse:
    def test_round_trip_of_defaults(self):
        text = config.dump_text(TrainConfig())
        assert config.apply_overrides(TrainConfig(), config.parse_text(text)) == TrainConfig()

    def test_dotted_keys_reach_nested_fields(self):
        out = config.apply_overrides(Outer(), {"inner.rate": "1e-3", "inner.sizes": "[64, 64]", "inner.on": "true"})
        assert out.inner == Inner(0.001, (64, 64), True)

    def test_comments_and_blank_lines(self):
        parsed = config.parse_text("# header\n\ncount = 7  # trailing\n")
        assert parsed == {"count": "7"}

    @pytest.mark.parametrize(
        "text,match",
        [("count 7", "expected"), ("count = 1\ncount = 2", "duplicate"), (" = 3", "empty key")],
    )
    def test_malformed_lines(self, text, match):
        with pytest.raises(ConfigError, match=match):
            config.parse_text(text)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            config.apply_overrides(Outer(), {"inner.rat": "1"})

    @pytest.mark.parametrize("key,value", [("count", "three"), ("inner.on", "maybe"), ("inner.rate", "fast")])
    def test_bad_values(self, key, value):
        with pytest.raises(ConfigError):
            config.apply_overrides(Outer(), {key: value})

    def test_validation_errors_become_config_errors(self):
        with pytest.raises(ConfigError):
            config.apply_overrides(TrainConfig(), {"surprise.eta": "2.0"})
        with pytest.raises(ConfigError):
            config.apply_overrides(TrainConfig(), {"trpo.max_kl": "0"})

    def test_quoted_strings(self):
        assert config.apply_overrides(Outer(), {"name": '"b c"'}).name == "b c"

    def test_floats_round_trip_exactly(self):
        out = config.apply_overrides(Outer(), {"inner.rate": 0.1 + 0.2})
        back = config.apply_overrides(Outer(), config.parse_text(config.dump_text(out)))
        assert back.inner.rate == 0.1 + 0.2


def test_save_and_load(tmp_path):
    cfg = config.apply_overrides(TrainConfig(), {"surprise.delta": "1e-4", "env.id": "plane2d"})
    config.save(tmp_path / "c.cfg", cfg)
    assert config.load(tmp_path / "c.cfg", TrainConfig()) == cfg


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        config.load(tmp_path / "absent.cfg", TrainConfig())
