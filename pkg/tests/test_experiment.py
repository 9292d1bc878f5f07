import numpy as np
import pytest

from fedmac.config import config_from_dict
from fedmac.errors import ContractError
from fedmac.experiment import metrics_csv, run_experiment, setup, sweep

BASE = {
    "data": {"N": 60, "M": 3, "d_in": 4, "C": 3},
    "federation": {"K": 3, "T": 2, "B": 8, "E": 1},
    "model": {"d_h": 6},
}


def cfg(**sections):
    raw = {k: dict(v) for k, v in BASE.items()}
    for name, body in sections.items():
        raw.setdefault(name, {}).update(body)
    return config_from_dict(raw)


class TestSetup:
    def test_clients_cover_the_pool(self):
        s = setup(cfg())
        assert sum(c.num_samples for c in s.clients) == 48
        assert len(s.test_set) == 12

    def test_client_masks_have_exact_counts(self):
        s = setup(cfg(missing={"client": {"p_m": 0.67, "p_s": 0.5}}))
        for c in s.clients:
            missing = (~c.data.presence).sum(axis=1)
            assert (missing > 0).sum() == int(np.floor(c.num_samples * 0.5 + 0.5))
            assert set(missing[missing > 0]) == {2}

    def test_server_mask_is_independent(self):
        s = setup(cfg(missing={"client": {"p_m": 0.0, "p_s": 0.0}, "server": {"p_m": 1.0, "p_s": 0.5}}))
        assert all(c.data.presence.all() for c in s.clients)
        assert (~s.test_set.presence.any(axis=1)).sum() == 6

    def test_min_present_filter(self):
        s = setup(cfg(missing={"min_present_modalities": 1, "client": {"p_m": 1.0, "p_s": 0.5}}))
        assert all(c.data.presence.any(axis=1).all() for c in s.clients)
        assert sum(c.num_samples for c in s.clients) == 24

    def test_dirichlet(self):
        s = setup(cfg(federation={"scheme": "dirichlet", "dirichlet_alpha": 0.5}))
        assert sum(c.num_samples for c in s.clients) == 48


class TestRun:
    def test_zero_rounds_only_initial_evaluation(self):
        res = run_experiment(cfg(federation={"T": 0}), write=False)
        assert [r.round for r in res.history] == [0]
        text = metrics_csv(res.history)
        assert text.splitlines()[1].startswith("0,") and text.count("\n") == 2

    def test_history_monotone(self):
        res = run_experiment(cfg(federation={"T": 3}), write=False)
        assert [r.round for r in res.history] == [0, 1, 2, 3]
        assert all(0 <= r.accuracy <= 1 for r in res.history)

    def test_eval_interval(self):
        res = run_experiment(cfg(federation={"T": 3, "eval_interval": 2}), write=False)
        acc = [r.accuracy for r in res.history]
        assert np.isnan(acc[1]) and not np.isnan(acc[2]) and not np.isnan(acc[3])

    @pytest.mark.parametrize("method", ["fedmac", "fedc", "fedma", "zero_impute", "fedprox_zero_impute"])
    def test_byte_identical_reruns(self, method, tmp_path):
        c1 = cfg(method={"name": method}, run={"output": str(tmp_path / "a"), "threads": 2})
        c2 = cfg(method={"name": method}, run={"output": str(tmp_path / "b"), "threads": 2})
        run_experiment(c1)
        run_experiment(c2)
        a, b = tmp_path / "a", tmp_path / "b"
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
        assert (a / "final.fmc").read_bytes() == (b / "final.fmc").read_bytes()
        ja, jb = (a / "metrics.jsonl").read_text().splitlines(), (b / "metrics.jsonl").read_text().splitlines()
        assert ja[1:] == jb[1:]

    def test_timing_column(self):
        res = run_experiment(cfg(federation={"T": 1}), write=False)
        assert metrics_csv(res.history).splitlines()[-1].endswith(",0.0")
        assert not metrics_csv(res.history, timing=True).splitlines()[-1].endswith(",0.0")

    def test_seed_changes_results(self):
        a = run_experiment(cfg(run={"seed": 1}), write=False)
        b = run_experiment(cfg(run={"seed": 2}), write=False)
        assert not a.params.equals(b.params)


class TestSweep:
    def test_rows(self, tmp_path):
        rows = sweep(cfg(run={"output": str(tmp_path)}, federation={"T": 1}), [(1.0, 0.1), (0.8, 0.5)], ["fedma", "zero_impute"], write_runs=False)
        assert [(r["method"], r["p_m"], r["p_s"]) for r in rows] == [
            ("fedma", 1.0, 0.1),
            ("zero_impute", 1.0, 0.1),
            ("fedma", 0.8, 0.5),
            ("zero_impute", 0.8, 0.5),
        ]

    def test_empty_axis(self):
        with pytest.raises(ContractError):
            sweep(cfg(), [], ["fedmac"])
