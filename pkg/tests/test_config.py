import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmac.config import (
    ExperimentConfig,
    config_from_dict,
    config_to_dict,
    dump_ini,
    load_config,
    with_overrides,
)
from fedmac.errors import ConfigError


def write(tmp_path, text, name="c.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestParsing:
    def test_defaults(self):
        cfg = config_from_dict({})
        assert (cfg.federation.K, cfg.federation.T, cfg.model.d_h) == (8, 60, 16)
        assert (cfg.missing.client.p_m, cfg.missing.client.p_s) == (0.8, 0.5)
        assert cfg.lam == 0.1

    def test_ini_file(self, tmp_path):
        p = write(tmp_path, "[federation]\nK = 4  # clients\n[missing.server]\np_m = 1.0\np_s = 0.1\n[method]\nlambda = 0.3\n")
        cfg = load_config(p)
        assert cfg.federation.K == 4
        assert (cfg.missing.server.p_m, cfg.missing.server.p_s) == (1.0, 0.1)
        assert cfg.lam == 0.3

    def test_probability_out_of_range_names_field(self, tmp_path):
        p = write(tmp_path, "[missing.client]\np_s = 1.5\n")
        with pytest.raises(ConfigError) as exc:
            load_config(p)
        assert exc.value.path == "missing.client.p_s"
        assert "missing.client.p_s" in str(exc.value)

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as exc:
            config_from_dict({"federation": {"rounds": 5}})
        assert exc.value.path == "federation.rounds"

    def test_unknown_section(self):
        with pytest.raises(ConfigError):
            config_from_dict({"optimizer": {"momentum": 0.9}})

    def test_keys_are_case_sensitive(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(write(tmp_path, "[federation]\nk = 4\n"))

    def test_bad_type(self):
        with pytest.raises(ConfigError) as exc:
            config_from_dict({"federation": {"K": "eight"}})
        assert exc.value.path == "federation.K"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.ini")

    @pytest.mark.parametrize(
        "raw, path",
        [
            ({"federation": {"lr": 0.0}}, "federation.lr"),
            ({"federation": {"E": 0}}, "federation.E"),
            ({"method": {"name": "fedx"}}, "method.name"),
            ({"method": {"mu": -1}}, "method.mu"),
            ({"method": {"tau": 0}}, "method.tau"),
            ({"data": {"split_ratio": 1.0}}, "data.split_ratio"),
            ({"missing": {"server": {"p_m": -0.1}}}, "missing.server.p_m"),
        ],
    )
    def test_validation_paths(self, raw, path):
        with pytest.raises(ConfigError) as exc:
            config_from_dict(raw)
        assert exc.value.path == path


class TestLambdaAndPresets:
    @pytest.mark.parametrize("p_m, p_s, lam", [(0.8, 0.5, 0.1), (0.8, 0.8, 0.2), (1.0, 0.5, 0.1), (1.0, 0.6, 0.2)])
    def test_auto_lambda_follows_client_missing_degree(self, p_m, p_s, lam):
        cfg = config_from_dict({"missing": {"client": {"p_m": p_m, "p_s": p_s}}})
        assert cfg.lam == lam
        assert config_to_dict(cfg)["method"]["lambda"] == lam

    def test_published_preset(self):
        cfg = config_from_dict({"run": {"preset": "published"}})
        f = cfg.federation
        assert (f.K, f.T, f.E, f.B, f.lr) == (32, 1000, 3, 32, 0.01)
        assert cfg.model.d_h == 128 and cfg.method.tau == 1.0

    def test_published_preset_dirichlet_learning_rate(self):
        cfg = config_from_dict({"run": {"preset": "published"}, "federation": {"scheme": "dirichlet"}})
        assert cfg.federation.lr == 0.008 and cfg.federation.dirichlet_alpha == 0.9

    def test_explicit_values_beat_preset(self):
        cfg = config_from_dict({"run": {"preset": "published"}, "federation": {"T": 5}})
        assert cfg.federation.T == 5 and cfg.federation.K == 32


class TestRoundTrip:
    def test_dict_round_trip(self):
        cfg = config_from_dict({"method": {"name": "fedprox_zero_impute", "mu": 0.5}, "missing": {"client": {"p_s": 0.9}}})
        again = config_from_dict(config_to_dict(cfg))
        assert config_to_dict(again) == config_to_dict(cfg)

    def test_ini_round_trip(self, tmp_path):
        cfg = config_from_dict({"federation": {"scheme": "dirichlet", "dirichlet_alpha": 0.3}, "model": {"per_modality_extractor": True}})
        again = load_config(write(tmp_path, dump_ini(cfg)))
        assert config_to_dict(again) == config_to_dict(cfg)

    @settings(max_examples=30, deadline=None)
    @given(
        st.floats(0, 1),
        st.floats(0, 1),
        st.integers(1, 16),
        st.sampled_from(["fedmac", "fedc", "fedma", "zero_impute", "fedprox_zero_impute"]),
    )
    def test_round_trip_property(self, p_m, p_s, k, method):
        cfg = config_from_dict({"missing": {"client": {"p_m": p_m, "p_s": p_s}}, "federation": {"K": k}, "method": {"name": method}})
        assert config_to_dict(config_from_dict(config_to_dict(cfg))) == config_to_dict(cfg)

    def test_overrides(self):
        cfg = with_overrides(ExperimentConfig(), seed=5, output="x", threads=2)
        assert (cfg.run.seed, cfg.run.output, cfg.run.threads) == (5, "x", 2)
        with pytest.raises(ConfigError):
            with_overrides(ExperimentConfig(), threads=0)
