import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from insiderlab.config import ConfigError, default_config, emit_config, parse_config, validate_config
from insiderlab.density_lab import DensityLabScenario
from insiderlab.errors import ConfigurationError
from insiderlab.honest_time import HonestTimeScenario


class TestValidate:
    def test_defaults(self):
        cfg = default_config("honest_time")
        assert cfg.engine.n_paths == 100_000
        assert cfg.engine.n_steps == 4096
        assert cfg.scenario.kind == "honest_time"
        assert isinstance(cfg.scenario.block.build(), HonestTimeScenario)
        assert cfg.deltas() == [2.0**-k for k in range(3, 10)]
        assert cfg.checkpoint_times() == [0.0, 0.25, 0.5, 0.75, 1.0]
        assert "entropy" in cfg.analyses()

    def test_lab_build(self):
        cfg = validate_config({"scenario": {"density_lab": {"variant": "stopped", "a": 0.5}}})
        assert cfg.scenario.block.build() == DensityLabScenario("stopped", a=0.5)

    def test_config_error_is_a_configuration_error(self):
        assert issubclass(ConfigError, ConfigurationError)

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError) as exc:
            validate_config({"scenario": {"honest_time": {"sigmaa": 0.3}}})
        assert "sigmaa" in str(exc.value)

    def test_all_errors_reported_at_once(self):
        with pytest.raises(ConfigError) as exc:
            validate_config(
                {
                    "scenario": {"honest_time": {"sigma": -1.0, "trunc_eps": 2.0}},
                    "engine": {"n_paths": 0, "chunk_size": 3},
                }
            )
        assert len(exc.value.errors) == 4
        assert any("trunc_eps must lie in (0,1)" in e for e in exc.value.errors)

    @pytest.mark.parametrize(
        "data, needle",
        [
            ({"scenario": {}}, "exactly one scenario"),
            ({"scenario": {"honest_time": {}, "density_lab": {}}}, "exactly one scenario"),
            ({"scenario": {"honest_time": {"T": 2.0, "T_sim": 1.0}}}, "T <= T_sim"),
            ({"scenario": {"density_lab": {"variant": "stopped"}}}, "0 < a < 1"),
            ({"scenario": {"honest_time": {"T": 0.3, "T_sim": 1.0}}, "engine": {"n_steps": 7}}, "not a grid node"),
            ({"scenario": {"honest_time": {}}, "analysis": {"c_grid": [0.5]}}, "must contain 0"),
            ({"scenario": {"honest_time": {}}, "analysis": {"delta_list": [0.1, 0.2]}}, "decreasing"),
            ({"scenario": {"honest_time": {}}, "analysis": {"checkpoints": [0.3]}}, "grid node"),
            ({"scenario": {"honest_time": {}}, "analysis": {"run": ["tau"]}}, "do not apply"),
            ({"scenario": {"honest_time": {}}, "analysis": {"run": ["bogus"]}}, "unknown analyses"),
            ({"scenario": {"density_lab": {}}, "engine": {"n_steps": 7}}, "even n_steps"),
            ({"scenario": {"factorization": {"schedules": [[0.6, 0.2]]}}}, "increasing"),
            ({"scenario": {"honest_time": {}}, "engine": {"seed": -1}}, "seed"),
        ],
    )
    def test_rejections(self, data, needle):
        with pytest.raises(ConfigError) as exc:
            validate_config(data)
        assert needle in str(exc.value)

    def test_precondition_tag(self):
        with pytest.raises(ConfigError) as exc:
            validate_config({"scenario": {"honest_time": {"sigma": 0.0}}})
        assert "[honest_time precondition]" in exc.value.errors[0]

    def test_factorization_analyses_follow_mode(self):
        assert default_config("factorization", mode="regime_switch").analyses() == ["regime_switch"]
        assert default_config("factorization").analyses() == ["orthogonal_product"]

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            default_config("heston")


class TestOverrides:
    def test_engine_overrides_revalidate(self):
        cfg = default_config("density_lab").with_overrides(n_paths=10, seed=None)
        assert cfg.engine.n_paths == 10
        assert cfg.engine.seed == 42
        with pytest.raises(ConfigError):
            cfg.with_overrides(n_steps=7)

    def test_output_override(self):
        cfg = default_config("density_lab").with_output("/tmp/x", ["json", "csv"])
        assert cfg.output.directory == "/tmp/x"
        assert cfg.output.formats == ["json", "csv"]


class TestFiles:
    def test_parse_roundtrip(self, tmp_path):
        cfg = default_config("density_lab", variant="stopped", a=0.25).with_overrides(n_paths=123)
        f = tmp_path / "cfg.json"
        f.write_text(emit_config(cfg))
        assert parse_config(f) == cfg

    def test_missing_file_is_os_error(self, tmp_path):
        with pytest.raises(OSError):
            parse_config(tmp_path / "nope.json")

    def test_bad_json(self, tmp_path):
        f = tmp_path / "bad.json"
        f.write_text("{not json")
        with pytest.raises(ConfigError):
            parse_config(f)
        f.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            parse_config(f)

    @given(
        sigma=st.floats(0.01, 3.0),
        n_paths=st.integers(2, 10**6),
        seed=st.integers(0, 2**64 - 1),
        antithetic=st.booleans(),
        steps_pow=st.integers(1, 12),
    )
    def test_emit_validate_roundtrip(self, sigma, n_paths, seed, antithetic, steps_pow):
        data = {
            "scenario": {"honest_time": {"sigma": sigma}},
            "engine": {"n_paths": n_paths, "seed": seed, "antithetic": antithetic, "n_steps": 2**steps_pow},
        }
        cfg = validate_config(data)
        assert validate_config(json.loads(emit_config(cfg))) == cfg


def test_minimal_honest_config_is_valid():
    cfg = validate_config({"scenario": {"honest_time": {"sigma": 0.3, "T": 1.0, "T_sim": 8.0}}})
    sc = cfg.scenario.block.build()
    assert (sc.sigma, sc.T, sc.T_sim) == (0.3, 1.0, 8.0)
