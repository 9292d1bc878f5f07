import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmac import autodiff as ad
from fedmac import losses
from fedmac.autodiff import Tensor
from fedmac.errors import ContractError


def space(rows, instance, is_embedding=None):
    rows = np.asarray(rows, float)
    if is_embedding is None:
        is_embedding = np.zeros(len(rows), bool)
    R = ad.cosine_matrix(Tensor(rows))
    return losses.similarity_space(R, np.asarray(instance), np.zeros(len(rows), int), is_embedding)


def four_rows():
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    return space([e1, e1, e2, e2], [0, 0, 1, 1])


def direct_infonce(R, positives, tau):
    total, pairs = 0.0, 0
    n = len(R)
    for a in range(n):
        for p in range(n):
            if positives[a, p]:
                denom = sum(np.exp(R[a, s] / tau) for s in range(n) if s != a)
                total += -np.log(np.exp(R[a, p] / tau) / denom)
                pairs += 1
    return total, pairs


class TestTaskLoss:
    def test_uniform(self):
        assert losses.task_loss(Tensor(np.zeros((4, 5))), [0, 1, 2, 3]).item() == pytest.approx(np.log(5), abs=1e-15)

    def test_large_margin_goes_to_zero(self):
        logits = np.eye(3) * 50.0
        assert losses.task_loss(Tensor(logits), [0, 1, 2]).item() < 1e-20

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(0)
        logits, labels = rng.normal(size=(7, 4)) * 3, rng.integers(0, 4, 7)
        direct = np.mean([-np.log(np.exp(l[y]) / np.exp(l).sum()) for l, y in zip(logits, labels)])
        assert abs(losses.task_loss(Tensor(logits), labels).item() - direct) < 1e-12

    def test_bad_label(self):
        with pytest.raises(ContractError):
            losses.task_loss(Tensor(np.zeros((1, 2))), [-1])


class TestContrastive:
    def test_four_row_hand_value(self):
        value = losses.contrastive_shared(four_rows(), 1.0).item()
        assert value == pytest.approx(-np.log(np.e / (np.e + 2)), abs=1e-12)
        assert value == pytest.approx(0.5514, abs=1e-4)

    def test_sum_reduction_counts_pairs(self):
        total = losses.contrastive(four_rows(), 1.0, "sum").item()
        assert total == pytest.approx(-4 * np.log(np.e / (np.e + 2)), abs=1e-12)

    @pytest.mark.parametrize("n", [2, 3, 7])
    def test_identical_rows(self, n):
        sp = space(np.ones((n, 3)), np.zeros(n, int))
        assert losses.contrastive(sp, 1.0).item() == pytest.approx(np.log(n - 1), abs=1e-12)

    def test_temperature_washout(self):
        sp = space(np.random.default_rng(1).normal(size=(6, 4)), [0, 0, 0, 1, 1, 1])
        assert losses.contrastive(sp, 1e8).item() == pytest.approx(np.log(5), abs=1e-7)

    def test_shared_and_sim_coincide(self):
        sp = space(np.random.default_rng(2).normal(size=(6, 4)), [0, 0, 1, 1, 2, 2])
        assert losses.contrastive_shared(sp, 0.5).item() == losses.contrastive_sim(sp, 0.5).item()

    def test_matches_direct_double_sum(self):
        rng = np.random.default_rng(3)
        inst = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2])
        emb = np.zeros(9, bool)
        emb[6:] = True
        sp = space(rng.normal(size=(9, 5)), inst, emb)
        total, pairs = direct_infonce(sp.matrix.data, sp.positives, 0.8)
        assert losses.contrastive(sp, 0.8, "sum").item() == pytest.approx(total, abs=1e-12)
        assert losses.contrastive(sp, 0.8).item() == pytest.approx(total / pairs, abs=1e-12)

    def test_embedding_rows_never_positive_or_anchor(self):
        emb = np.array([False, False, True, True])
        pos = losses.same_instance_positives(np.array([0, 0, 1, 1]), emb)
        assert not pos[2:].any() and not pos[:, 2:].any()
        assert pos[0, 1] and pos[1, 0] and not pos[0, 0]

    def test_lone_modality_is_skipped(self):
        sp = space(np.eye(3), [0, 1, 1])
        assert sp.skipped_anchors == 1

    def test_no_pairs_gives_zero(self):
        assert losses.contrastive(space(np.eye(3), [0, 1, 2]), 1.0).item() == 0.0

    def test_monotone_in_positive_similarity(self):
        def term(r01):
            R = np.array([[1.0, r01, 0.2], [r01, 1.0, -0.1], [0.2, -0.1, 1.0]])
            sp = losses.SimilaritySpace(Tensor(R), np.array([[0, 1, 0], [0, 0, 0], [0, 0, 0]], bool), np.zeros(3), np.zeros(3), np.zeros(3, bool))
            return losses.contrastive(sp, 1.0, "sum").item()

        values = [term(r) for r in (0.9, 0.5, 0.0, -0.5)]
        assert all(b > a for a, b in zip(values, values[1:]))

    def test_bad_arguments(self):
        with pytest.raises(ContractError):
            losses.contrastive(four_rows(), 0.0)
        with pytest.raises(ContractError):
            losses.contrastive(four_rows(), 1.0, "median")

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 100_000), st.floats(0.05, 20.0), st.floats(0.1, 100.0))
    def test_positive_and_scale_invariant(self, seed, tau, scale):
        rng = np.random.default_rng(seed)
        rows = rng.normal(size=(8, 3))
        inst = np.repeat(np.arange(4), 2)
        a = losses.contrastive(space(rows, inst), tau).item()
        b = losses.contrastive(space(rows * scale, inst), tau).item()
        assert a > 0
        assert a == pytest.approx(b, rel=1e-10)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        rows = rng.normal(size=(6, 3))
        inst = np.array([0, 0, 1, 1, 2, 2])

        def value(r):
            return losses.contrastive(space(r, inst), 0.7).item()

        X = Tensor(rows, requires_grad=True, name="X")
        sp = losses.similarity_space(ad.cosine_matrix(X), inst, np.zeros(6, int), np.zeros(6, bool))
        g = ad.backward(losses.contrastive(sp, 0.7))["X"]
        num = np.zeros_like(rows)
        for i in np.ndindex(rows.shape):
            up, dn = rows.copy(), rows.copy()
            up[i] += 1e-6
            dn[i] -= 1e-6
            num[i] = (value(up) - value(dn)) / 2e-6
        np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-9)


class TestCombine:
    @pytest.mark.parametrize("p_m, p_s, lam", [(1.0, 0.5, 0.1), (0.8, 0.5, 0.1), (0.8, 0.8, 0.2), (1.0, 1.0, 0.2), (0.5, 1.0, 0.1)])
    def test_lambda_rule(self, p_m, p_s, lam):
        assert losses.default_lambda(p_m, p_s) == lam

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 1))
    def test_breakdown_total(self, task, shared, sim, lam):
        b = losses.combine(task, shared, sim, lam)
        assert abs(b.total - (task + lam * (shared + sim))) <= 1e-12

    def test_negative_lambda(self):
        with pytest.raises(ContractError):
            losses.combine(1.0, 1.0, 1.0, -0.1)

    def test_total_loss_graph(self):
        t, s, z = Tensor(1.0), Tensor(2.0), Tensor(3.0)
        assert losses.total_loss(t, s, z, 0.1).item() == pytest.approx(1.5, abs=1e-15)
        assert losses.total_loss(t, s, z, 0.0) is t
        assert losses.total_loss(t, None, z, 0.5).item() == pytest.approx(2.5)
