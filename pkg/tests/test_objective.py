import numpy as np
import pytest

from lsfd import objective as obj
from lsfd import rng as rngmod
from lsfd import tensor as T
from lsfd.model import SumAggregator, TwoLayerHead, split_features
from lsfd.objective import (BankSnapshot, LossConfig, LossFlags, MemoryBank,
                            ViewBatchFeatures, infonce, infonce_batch,
                            loss_instance, loss_non_stationary,
                            loss_stationary, sim, total_loss)
from lsfd.tensor import Tensor


def numpy_head(head, z):
    """Independent numpy replay of the two-layer head."""
    p = {k: v.data for k, v in head.params.items()}
    return np.maximum(z @ p["w1"] + p["b1"], 0.0) @ p["w2"] + p["b2"]


def oracle_infonce(head, anchor, positive, negatives, tau):
    """Brute-force softmax oracle on plain numpy arrays."""
    def proj(z):
        return numpy_head(head, z) if head is not None else z

    def cos(u, v):
        return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))

    a = proj(anchor)
    sims = [cos(a, proj(positive)) / tau]
    sims += [cos(a, proj(n)) / tau for n in negatives]
    e = np.exp(sims)
    return float(-np.log(e[0] / e.sum()))


class TestSim:
    def test_identical_vectors(self):
        s = sim(None, [3.0, 1.0, 2.0], [3.0, 1.0, 2.0], tau=0.1)
        assert abs(s.item() - 10.0) < 1e-12

    def test_orthogonal_vectors(self):
        s = sim(None, [1.0, 0.0], [0.0, 1.0], tau=0.1)
        assert s.item() == 0.0

    def test_hand_cosine(self):
        s = sim(None, [3.0, 4.0], [4.0, 3.0], tau=0.1)
        assert abs(s.item() - 9.6) < 1e-12

    def test_symmetric(self):
        rng = np.random.default_rng(0)
        head = TwoLayerHead(4, rngmod.stream(0, rngmod.INIT, 0))
        z1, z2 = rng.normal(size=4), rng.normal(size=4)
        assert abs(sim(head, z1, z2, 0.1).item() - sim(head, z2, z1, 0.1).item()) < 1e-12

    def test_scale_invariance_identity_head(self):
        rng = np.random.default_rng(1)
        z1, z2 = rng.normal(size=5), rng.normal(size=5)
        a = sim(None, z1, z2, 0.1).item()
        b = sim(None, 3.7 * z1, z2, 0.1).item()
        assert abs(a - b) < 1e-10

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError, match="zero-norm"):
            sim(None, [0.0, 0.0], [1.0, 0.0], tau=0.1)


class TestInfonce:
    def test_empty_negatives_exact_zero(self):
        loss = infonce(None, [1.0, 2.0], [1.0, 2.0], [], tau=0.1)
        assert loss.item() == 0.0

    def test_anchor_equals_positive_one_orthogonal_negative(self):
        loss = infonce(None, [1.0, 0.0], [1.0, 0.0], [[0.0, 1.0]], tau=0.1)
        assert abs(loss.item() - np.log(1.0 + np.exp(-10.0))) < 1e-12

    @pytest.mark.parametrize("k", [1, 3, 7])
    def test_k_identical_negatives(self, k):
        z = [0.6, -0.8]
        loss = infonce(None, z, z, [z] * k, tau=0.1)
        assert abs(loss.item() - np.log(k + 1.0)) < 1e-12

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(2)
        for trial in range(100):
            d = int(rng.integers(2, 9))
            n_neg = int(rng.integers(0, 17))
            head = TwoLayerHead(d, rngmod.stream(3, rngmod.INIT, trial)) \
                if trial % 2 else None
            anchor = rng.normal(size=d)
            positive = rng.normal(size=d)
            negatives = [rng.normal(size=d) for _ in range(n_neg)]
            ours = infonce(head, anchor, positive, negatives, tau=0.1).item()
            ref = oracle_infonce(head, anchor, positive, negatives, 0.1)
            assert abs(ours - ref) < 1e-12

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            loss = infonce(None, rng.normal(size=4), rng.normal(size=4),
                           [rng.normal(size=4) for _ in range(5)], tau=0.1)
            assert loss.item() >= 0.0

    def test_gradients_reach_anchor_and_head_not_negatives(self):
        head = TwoLayerHead(3, rngmod.stream(4, rngmod.INIT, 0))
        anchors = Tensor(np.random.default_rng(4).normal(size=(2, 3)), requires_grad=True)
        positives = np.random.default_rng(5).normal(size=(2, 3))
        negatives = Tensor(np.random.default_rng(6).normal(size=(4, 3)), requires_grad=True)
        loss = infonce_batch(head, anchors, positives, negatives.data, tau=0.1)
        T.backward(loss)
        assert anchors.grad is not None
        assert all(p.grad is not None for p in head.params.values())
        assert negatives.grad is None

    def test_infonce_gradient_correct(self):
        head = TwoLayerHead(3, rngmod.stream(5, rngmod.INIT, 0))
        positives = np.random.default_rng(7).normal(size=(2, 3))
        negatives = np.random.default_rng(8).normal(size=(4, 3))

        def f(a):
            return infonce_batch(head, a, positives, negatives, tau=0.1)

        x0 = Tensor(np.random.default_rng(9).normal(size=(2, 3)), requires_grad=True)
        assert T.grad_check(f, x0, step=1e-5) < 1e-4


class TestMemoryBank:
    def test_fifo_eviction(self):
        bank = MemoryBank(capacity=4, half_dim=2)
        for i in range(5):
            bank.push(np.full(2, float(i)), np.full(2, float(-i)))
        snap = bank.snapshot()
        assert len(bank) == 4
        assert snap.stationary[0, 0] == 1.0  # entry 0 evicted
        assert snap.stationary[-1, 0] == 4.0

    def test_snapshot_stable_under_pushes(self):
        bank = MemoryBank(capacity=4, half_dim=2)
        bank.push(np.ones(2), np.zeros(2))
        snap = bank.snapshot()
        bank.push(np.full(2, 9.0), np.full(2, 9.0))
        assert len(snap) == 1 and snap.stationary[0, 0] == 1.0

    def test_entries_detached(self):
        bank = MemoryBank(capacity=2, half_dim=2)
        src = np.ones(2)
        bank.push(src, src)
        src[...] = 5.0
        assert bank.snapshot().stationary[0, 0] == 1.0

    def test_dim_mismatch_rejected(self):
        bank = MemoryBank(capacity=2, half_dim=2)
        with pytest.raises(obj.ObjectiveError):
            bank.push(np.ones(3), np.ones(2))

    def test_full_concatenates_halves(self):
        bank = MemoryBank(capacity=2, half_dim=2)
        bank.push(np.array([1.0, 2.0]), np.array([3.0, 4.0]))
        assert np.array_equal(bank.snapshot().full, [[1.0, 2.0, 3.0, 4.0]])


def make_feats(rng, batch=3, n_views=2, dim=8):
    half = dim // 2
    short = split_features(Tensor(rng.normal(size=(batch * n_views, dim)),
                                  requires_grad=True))
    long_q = split_features(Tensor(rng.normal(size=(batch, dim)), requires_grad=True))
    return ViewBatchFeatures(
        short=short,
        long_query=long_q,
        key_stationary=rng.normal(size=(batch, half)),
        key_non_stationary=rng.normal(size=(batch, half)),
        key_full=rng.normal(size=(batch, dim)),
        n_views=n_views,
    )


class TestLosses:
    def setup_method(self):
        self.rng = np.random.default_rng(10)
        self.cfg = LossConfig(tau=0.1)
        self.head = TwoLayerHead(4, rngmod.stream(6, rngmod.INIT, 0))
        self.head_full = TwoLayerHead(8, rngmod.stream(6, rngmod.INIT, 1))

    def empty_snap(self, half=4):
        e = np.empty((0, half))
        return BankSnapshot(e, e.copy())

    def snap(self, k=5, half=4):
        return BankSnapshot(self.rng.normal(size=(k, half)),
                            self.rng.normal(size=(k, half)))

    def test_empty_bank_losses_zero(self):
        feats = make_feats(self.rng)
        j = np.zeros(3, dtype=int)
        assert loss_stationary(feats, self.empty_snap(), self.head, self.cfg, j).item() == 0.0
        assert loss_non_stationary(feats, SumAggregator(2, 4), self.empty_snap(),
                                   self.head, self.cfg).item() == 0.0
        assert loss_instance(feats, self.empty_snap(), self.head_full, self.cfg).item() == 0.0

    def test_stationary_matches_manual_infonce(self):
        feats = make_feats(self.rng, batch=2)
        snap = self.snap(k=4)
        j = np.array([1, 0])
        batched = loss_stationary(feats, snap, self.head, self.cfg, j).item()
        manual = []
        for b, jj in enumerate(j):
            anchor = feats.short.stationary.data[b * 2 + jj]
            manual.append(infonce(self.head, anchor, feats.key_stationary[b],
                                  list(snap.stationary), tau=0.1).item())
        assert abs(batched - np.mean(manual)) < 1e-12

    def test_non_stationary_single_view_sum_reduces_to_infonce(self):
        feats = make_feats(self.rng, batch=2, n_views=1)
        snap = self.snap(k=3)
        val = loss_non_stationary(feats, SumAggregator(1, 4), snap,
                                  self.head, self.cfg).item()
        manual = np.mean([
            infonce(self.head, feats.short.non_stationary.data[b],
                    feats.key_non_stationary[b], list(snap.non_stationary), 0.1).item()
            for b in range(2)])
        assert abs(val - manual) < 1e-12

    def test_non_stationary_sum_order_invariant(self):
        rng = np.random.default_rng(11)
        feats = make_feats(rng, batch=2, n_views=3)
        snap = self.snap(k=4)
        base = loss_non_stationary(feats, SumAggregator(3, 4), snap,
                                   self.head, self.cfg).item()
        # permute the short views within each sample
        perm = np.array([2, 0, 1])
        data = feats.short.full.data.reshape(2, 3, 8)[:, perm].reshape(6, 8)
        feats_perm = ViewBatchFeatures(
            short=split_features(Tensor(data)),
            long_query=feats.long_query,
            key_stationary=feats.key_stationary,
            key_non_stationary=feats.key_non_stationary,
            key_full=feats.key_full,
            n_views=3)
        permuted = loss_non_stationary(feats_perm, SumAggregator(3, 4), snap,
                                       self.head, self.cfg).item()
        assert abs(base - permuted) < 1e-12

    def test_instance_matches_manual(self):
        feats = make_feats(self.rng, batch=2)
        snap = self.snap(k=4)
        val = loss_instance(feats, snap, self.head_full, self.cfg).item()
        manual = np.mean([
            infonce(self.head_full, feats.long_query.full.data[b],
                    feats.key_full[b], list(snap.full), 0.1).item()
            for b in range(2)])
        assert abs(val - manual) < 1e-12

    def test_identical_halves_everywhere_closed_form(self):
        # all stationary vectors equal: every similarity identical -> ln(K+1)
        b, n, half, k = 2, 2, 4, 6
        z = np.full(half, 0.5)
        short = split_features(Tensor(np.tile(np.concatenate([z, z]), (b * n, 1))))
        feats = ViewBatchFeatures(
            short=short,
            long_query=split_features(Tensor(np.tile(np.concatenate([z, z]), (b, 1)))),
            key_stationary=np.tile(z, (b, 1)),
            key_non_stationary=np.tile(z, (b, 1)),
            key_full=np.tile(np.concatenate([z, z]), (b, 1)),
            n_views=n)
        snap = BankSnapshot(np.tile(z, (k, 1)), np.tile(z, (k, 1)))
        val = loss_stationary(feats, snap, None, self.cfg, np.zeros(b, dtype=int)).item()
        assert abs(val - np.log(k + 1.0)) < 1e-12

    def test_total_loss_flags(self):
        parts = {"stationary": Tensor(1.5), "non_stationary": Tensor(2.0),
                 "instance": Tensor(0.25)}
        assert total_loss(parts, LossFlags(True, True, True)).item() == 3.75
        assert total_loss(parts, LossFlags(True, False, False)).item() == 1.5
        assert total_loss(parts, LossFlags(False, False, False)).item() == 0.0

    def test_losses_backpropagate_to_short_views(self):
        feats = make_feats(self.rng)
        snap = self.snap()
        loss = loss_stationary(feats, snap, self.head, self.cfg,
                               np.array([0, 1, 0]))
        T.backward(loss)
        assert feats.short.full.grad is not None
        # anchors were rows {0, 3, 4}; unselected rows keep zero gradient
        grad_rows = np.abs(feats.short.full.grad).sum(axis=1)
        assert grad_rows[0] > 0 and grad_rows[3] > 0
        assert grad_rows[1] == 0.0 and grad_rows[2] == 0.0
