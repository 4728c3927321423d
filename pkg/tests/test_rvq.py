"""Nearest-neighbor quantization, residual cascades, EMA learning, k-means init."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rvqtok import autodiff as ad
from rvqtok.autodiff import Tape, Tensor, backward
from rvqtok.errors import ConfigError
from rvqtok.optim import Parameter
from rvqtok.rvq import (Codebook, RVQStack, begin_epoch, end_epoch_reinit,
                        ema_update, kmeans_init, kmeans_init_stack,
                        normalize_rows, quantization_loss, quantize_level,
                        rvq_quantize, straight_through)


def _stack(model_dim=6, code_dim=4, levels=2, entries=8, seed=0, identity=False):
    rng = np.random.default_rng(seed)
    stack = RVQStack.create(model_dim, code_dim, levels, entries, rng)
    if identity:
        assert model_dim == code_dim
        stack.down_proj = Parameter(np.eye(model_dim), "down")
        stack.up_proj = Parameter(np.eye(model_dim), "up")
    return stack


class TestQuantizeLevel:
    def test_exact_entry_selected(self):
        p = np.array([0.3, -0.7, 0.2])
        entries = np.vstack([p + 5.0, p, p - 9.0])
        idx, z = quantize_level(p, Codebook(entries))
        assert idx == 1
        np.testing.assert_array_equal(z, p)

    def test_collinear_wins_under_normalized_metric(self):
        book = Codebook(np.array([[2.0, 0.0], [0.0, 3.0]]))
        idx, z = quantize_level(np.array([1.0, 0.0]), book)
        assert idx == 0
        np.testing.assert_array_equal(z, [2.0, 0.0])

    def test_matches_bruteforce_scan(self):
        rng = np.random.default_rng(42)
        book = Codebook(rng.normal(size=(16, 5)))
        queries = rng.normal(size=(100, 5))
        idx, _ = quantize_level(queries, book)
        vn = normalize_rows(book.entries)
        for i, q in enumerate(queries):
            qn = q / np.linalg.norm(q)
            dists = [float(((qn - vn[j]) ** 2).sum()) for j in range(16)]
            assert idx[i] == int(np.argmin(dists))

    def test_zero_query_falls_back_to_raw_distance(self):
        book = Codebook(np.array([[5.0, 0.0], [0.1, 0.1]]))
        idx, z = quantize_level(np.zeros(2), book)
        assert idx == 1  # nearest raw entry, not the unit-normalized tie

    def test_tie_breaks_to_lowest_index(self):
        book = Codebook(np.array([[1.0, 0.0], [2.0, 0.0]]))  # same direction
        idx, _ = quantize_level(np.array([3.0, 0.0]), book)
        assert idx == 0

    def test_empty_codebook_rejected(self):
        with pytest.raises(ConfigError):
            Codebook(np.zeros((0, 3)))

    def test_euclidean_metric_option(self):
        book = Codebook(np.array([[2.0, 0.0], [0.9, 0.1]]), )
        idx, _ = quantize_level(np.array([1.0, 0.0]), book, metric="euclidean")
        assert idx == 1


class TestRVQQuantize:
    def test_single_level_exact_reconstruction_in_code_space(self):
        stack = _stack(model_dim=4, code_dim=4, levels=1, entries=4, identity=True)
        p = np.array([0.5, -0.25, 1.0, 0.0])
        stack.codebooks[0].entries[2] = p
        assign, p_hat = rvq_quantize(p, stack)
        assert assign.indices.tolist() == [[2]]
        np.testing.assert_allclose(assign.residual, 0.0, atol=1e-12)
        np.testing.assert_allclose(p_hat, p, atol=1e-12)

    def test_two_orthogonal_levels(self):
        stack = _stack(model_dim=2, code_dim=2, levels=2, entries=2, identity=True)
        stack.codebooks[0].entries = np.array([[3.0, 0.0], [0.0, 1.0]])
        stack.codebooks[1].entries = np.array([[3.0, 0.0], [0.0, 1.0]])
        p = np.array([3.0, 1.0])
        assign, _ = rvq_quantize(p, stack)
        # level 1 takes the dominant axis-aligned entry, level 2 the remainder
        assert assign.indices[0, 0] == 0
        assert assign.indices[0, 1] == 1
        np.testing.assert_allclose(assign.residual, 0.0, atol=1e-12)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_telescoping_identity(self, seed):
        rng = np.random.default_rng(seed)
        stack = RVQStack.create(6, 4, levels=3, entries=8, rng=rng)
        p = rng.normal(size=(5, 6))
        assign, _ = rvq_quantize(p, stack)
        projected = p @ stack.down_proj.data
        rebuilt = assign.codewords.sum(axis=0) + assign.residual
        assert np.abs(rebuilt - projected).max() < 1e-10

    def test_index_determinism(self):
        stack = _stack(seed=3)
        rng = np.random.default_rng(5)
        p = rng.normal(size=(7, 6))
        a1, _ = rvq_quantize(p, stack)
        a2, _ = rvq_quantize(p, stack)
        assert np.array_equal(a1.indices, a2.indices)

    def test_forced_indices_bypass_search(self):
        stack = _stack(levels=2, entries=4)
        p = np.random.default_rng(9).normal(size=(3, 6))
        forced = np.array([[1, 2], [0, 0], [3, 1]])
        assign, _ = rvq_quantize(p, stack, forced_indices=forced)
        assert np.array_equal(assign.indices, forced)


class TestStraightThrough:
    def test_forward_bit_exact(self):
        rng = np.random.default_rng(1)
        p = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        p_hat = Tensor(rng.normal(size=(4, 3)))
        out = straight_through(p, p_hat)
        assert np.array_equal(out.data, p_hat.data)

    def test_identity_backward(self):
        rng = np.random.default_rng(2)
        p = Tensor(rng.normal(size=(5,)), requires_grad=True)
        p_hat = Tensor(rng.normal(size=(5,)))
        with Tape() as tape:
            loss = ad.tsum(straight_through(p, p_hat))
        backward(tape, loss)
        np.testing.assert_array_equal(p.grad, np.ones(5))

    def test_gradient_matches_loss_at_phat(self):
        # d/dp f(straight_through(p, p_hat)) == f'(p_hat) with identity backward
        rng = np.random.default_rng(3)
        p = Tensor(rng.normal(size=(4,)), requires_grad=True)
        p_hat = Tensor(rng.normal(size=(4,)))
        with Tape() as tape:
            loss = ad.tsum(ad.square(straight_through(p, p_hat)))
        backward(tape, loss)
        np.testing.assert_allclose(p.grad, 2.0 * p_hat.data, atol=1e-12)


class TestQuantizationLoss:
    def test_zero_when_codewords_match(self):
        p = [np.array([[1.0, 2.0]]), np.array([[0.5, -0.5]])]
        assert quantization_loss(p, p, beta=0.25).item() == 0.0

    def test_hand_computed_value(self):
        loss = quantization_loss([np.array([[1.0, 0.0]])], [np.array([[0.0, 0.0]])],
                                 beta=0.25)
        assert abs(loss.item() - 0.125) < 1e-12

    def test_beta_linearity(self):
        rng = np.random.default_rng(4)
        p = [rng.normal(size=(3, 2))]
        z = [rng.normal(size=(3, 2))]
        l1 = quantization_loss(p, z, beta=0.25).item()
        l2 = quantization_loss(p, z, beta=0.5).item()
        assert abs(l2 - 2.0 * l1) < 1e-12

    def test_gradient_flows_to_inputs_not_codewords(self):
        rng = np.random.default_rng(5)
        p = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        z = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        with Tape() as tape:
            loss = quantization_loss([p], [z], beta=1.0)
        grads = backward(tape, loss)
        assert p in grads
        assert z not in grads  # stop-gradient side


class TestEMA:
    def test_converges_to_constant_input(self):
        book = Codebook(np.random.default_rng(0).normal(size=(4, 3)))
        u = np.array([0.3, -1.2, 0.7])
        for _ in range(600):
            ema_update(book, np.zeros(8, dtype=int), np.tile(u, (8, 1)), decay=0.99)
        assert np.abs(book.entries[0] - u).max() < 1e-3

    def test_no_assignments_leave_entries_unchanged(self):
        rng = np.random.default_rng(1)
        book = Codebook(rng.normal(size=(4, 3)))
        book.ema_size = np.ones(4)
        before = book.entries.copy()
        sizes_before = book.ema_size.copy()
        ema_update(book, np.zeros(0, dtype=int), np.zeros((0, 3)), decay=0.9)
        np.testing.assert_array_equal(book.entries, before)
        np.testing.assert_allclose(book.ema_size, 0.9 * sizes_before)

    def test_entries_stay_finite_under_tiny_clusters(self):
        book = Codebook(np.random.default_rng(2).normal(size=(8, 2)))
        rng = np.random.default_rng(3)
        for _ in range(200):
            ema_update(book, rng.integers(0, 2, size=4), rng.normal(size=(4, 2)),
                       decay=0.5)
        assert np.isfinite(book.entries).all()

    def test_dead_code_reinit_only_after_full_epoch(self):
        rng = np.random.default_rng(4)
        book = Codebook(rng.normal(size=(4, 2)))
        begin_epoch(book)
        # entry 0 heavily used early in the epoch, then silent
        ema_update(book, np.zeros(16, dtype=int), rng.normal(size=(16, 2)), decay=0.5)
        for _ in range(30):
            ema_update(book, np.full(4, 1, dtype=int), rng.normal(size=(4, 2)), decay=0.5)
        samples = rng.normal(size=(10, 2))
        n = end_epoch_reinit(book, samples, rng)
        # entries 0 and 1 were both alive at some point this epoch; 2 and 3 never
        assert n == 2

    def test_decay_validation(self):
        book = Codebook(np.zeros((2, 2)) + 1.0)
        with pytest.raises(ConfigError):
            ema_update(book, np.zeros(1, dtype=int), np.zeros((1, 2)), decay=1.5)


class TestKMeansInit:
    def test_recovers_separated_cluster_means(self):
        rng = np.random.default_rng(5)
        a = np.array([10.0, 0.0]) + 0.01 * rng.normal(size=(40, 2))
        b = np.array([0.0, -8.0]) + 0.01 * rng.normal(size=(40, 2))
        samples = np.vstack([a, b])
        book = Codebook(np.zeros((2, 2)) + 0.1)
        kmeans_init(book, samples, iters=50, rng=np.random.default_rng(0))
        means = {tuple(np.round(a.mean(axis=0), 6)), tuple(np.round(b.mean(axis=0), 6))}
        got = {tuple(np.round(e, 6)) for e in book.entries}
        for g, m in zip(sorted(got), sorted(means)):
            assert np.abs(np.array(g) - np.array(m)).max() < 1e-6

    def test_k_equals_samples_is_permutation(self):
        rng = np.random.default_rng(6)
        samples = rng.normal(size=(5, 3))
        book = Codebook(np.zeros((5, 3)) + 0.5)
        kmeans_init(book, samples, iters=20, rng=np.random.default_rng(1))
        got = sorted(map(tuple, np.round(book.entries, 9)))
        expect = sorted(map(tuple, np.round(samples, 9)))
        assert got == expect

    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(7)
        samples = rng.normal(size=(50, 4))
        books = []
        for _ in range(2):
            book = Codebook(np.zeros((8, 4)) + 0.5)
            kmeans_init(book, samples, iters=10, rng=np.random.default_rng(99))
            books.append(book.entries.copy())
        assert np.array_equal(books[0], books[1])

    def test_duplicate_padding_warns(self):
        samples = np.tile(np.array([[1.0, 2.0]]), (6, 1))
        book = Codebook(np.zeros((4, 2)) + 0.5)
        with pytest.warns(UserWarning):
            kmeans_init(book, samples, iters=5, rng=np.random.default_rng(2))

    def test_too_few_samples_rejected(self):
        book = Codebook(np.zeros((4, 2)) + 0.5)
        with pytest.raises(ConfigError):
            kmeans_init(book, np.zeros((2, 2)), rng=np.random.default_rng(0))

    def test_stack_init_reduces_residual(self):
        rng = np.random.default_rng(8)
        stack = RVQStack.create(6, 4, levels=3, entries=16, rng=rng)
        p = rng.normal(size=(200, 6))
        p_code = p @ stack.down_proj.data
        kmeans_init_stack(stack, p_code, iters=10, rng=np.random.default_rng(3))
        assign = stack.quantize_codes(p_code)
        norms = [np.linalg.norm(assign.level_inputs[i], axis=1).mean()
                 for i in range(3)]
        norms.append(np.linalg.norm(assign.residual, axis=1).mean())
        # residual magnitude decays across trained levels
        assert norms[-1] < norms[0]
        assert norms[1] < norms[0]
