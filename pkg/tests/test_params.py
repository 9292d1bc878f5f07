import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmac.errors import ContractError, DataFormatError
from fedmac.model import ModelConfig, param_layout
from fedmac.params import (
    ModelParams,
    ParamSpec,
    init_params,
    load_params,
    params_from_bytes,
    params_to_bytes,
    save_params,
    sgd_step,
)

LAYOUT = param_layout(ModelConfig(num_modalities=3, d_in=4, d_h=8, num_classes=3))


class TestInit:
    def test_same_seed_same_values(self):
        assert init_params(LAYOUT, 7).equals(init_params(LAYOUT, 7))

    def test_different_seed_differs(self):
        assert not init_params(LAYOUT, 7).equals(init_params(LAYOUT, 8))

    def test_xavier_bounds_and_zero_biases(self):
        p = init_params([ParamSpec("w", (30, 20)), ParamSpec("b", (20,), "bias")], 0)
        bound = np.sqrt(6.0 / 50)
        assert np.all(np.abs(p["w"]) <= bound)
        assert np.abs(p["w"]).max() > 0.9 * bound
        np.testing.assert_array_equal(p["b"], 0.0)

    def test_embedding_scale(self):
        p = init_params([ParamSpec("e", (400, 64), "embedding")], 1)
        np.testing.assert_allclose(p["e"].std(), 1 / 8, rtol=0.03)

    def test_empty_layout(self):
        with pytest.raises(ContractError):
            init_params([], 0)

    def test_snapshot_is_read_only(self):
        p = init_params(LAYOUT, 0)
        with pytest.raises(ValueError):
            p["decoder.b"][0] = 1.0


class TestSGD:
    def test_plain_update(self):
        p = ModelParams({"a": np.array([1.0, 2.0])})
        q = sgd_step(p, {"a": np.array([10.0, -10.0])}, 0.1)
        np.testing.assert_allclose(q["a"], [0.0, 3.0])
        np.testing.assert_array_equal(p["a"], [1.0, 2.0])

    def test_zero_lr_is_identity(self):
        p = init_params(LAYOUT, 3)
        grads = {k: np.ones_like(v) for k, v in p.items()}
        assert sgd_step(p, grads, 0.0).equals(p)

    def test_missing_gradient(self):
        p = ModelParams({"a": np.zeros(2), "b": np.zeros(1)})
        with pytest.raises(ContractError, match="b"):
            sgd_step(p, {"a": np.zeros(2)}, 0.1)

    def test_negative_lr(self):
        with pytest.raises(ContractError):
            sgd_step(ModelParams({"a": np.zeros(1)}), {"a": np.zeros(1)}, -1.0)


class TestCheckpointFormat:
    def test_round_trip_bitwise(self, tmp_path):
        p = init_params(LAYOUT, 5)
        save_params(p, tmp_path / "p.fmc")
        assert load_params(tmp_path / "p.fmc").equals(p)
        assert (tmp_path / "p.fmc").read_bytes()[:4] == b"FMC1"

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(allow_nan=False, allow_infinity=True, width=64), min_size=1, max_size=12))
    def test_round_trip_arbitrary_values(self, values):
        p = ModelParams({"x": np.array(values), "s": np.array(values[0])})
        q = params_from_bytes(params_to_bytes(p))
        assert q.equals(p)
        assert q["s"].shape == ()

    def test_truncated_reports_offset(self):
        blob = params_to_bytes(init_params(LAYOUT, 0))
        with pytest.raises(DataFormatError) as exc:
            params_from_bytes(blob[:-3])
        assert exc.value.offset > 0
        assert "offset" in str(exc.value)

    def test_bad_magic(self):
        with pytest.raises(DataFormatError) as exc:
            params_from_bytes(b"XXXX\x00\x00\x00\x00")
        assert exc.value.offset == 0

    def test_trailing_bytes(self):
        blob = params_to_bytes(ModelParams({"a": np.zeros(1)}))
        with pytest.raises(DataFormatError):
            params_from_bytes(blob + b"\x00")
