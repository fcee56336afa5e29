"""Codebook quantization against an exhaustive-scan oracle, gradient contracts,
posterior properties, and usage accounting."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from xr1.codebook import (
    SharedCodebook,
    code_posterior,
    nearest_code,
    quantize,
    straight_through,
    usage_entropy,
    usage_histogram,
    vq_terms,
)


def scan_oracle(z: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Independent brute force: per-row scan over every entry, lowest index wins."""
    out = np.empty(z.shape[0], dtype=np.int64)
    for i, row in enumerate(z):
        best_j, best_d = 0, None
        for j, entry in enumerate(entries):
            d = float(np.sum((row - entry) ** 2))
            if best_d is None or d < best_d:
                best_j, best_d = j, d
        out[i] = best_j
    return out


class TestQuantize:
    def test_nearest_by_inspection(self):
        cb = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        idx, z_q = quantize(torch.tensor([[0.9, 0.1]]), cb)
        assert idx.tolist() == [0]
        assert torch.equal(z_q, torch.tensor([[1.0, 0.0]]))

    def test_exact_entry_is_identity(self):
        cb = torch.randn(8, 4)
        idx, z_q = quantize(cb[5].clone().unsqueeze(0), cb)
        assert idx.item() == 5
        assert torch.equal(z_q[0], cb[5])

    def test_matches_oracle_random(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(1000, 16)).astype(np.float32)
        cb = rng.normal(size=(64, 16)).astype(np.float32)
        got = nearest_code(torch.from_numpy(z), torch.from_numpy(cb)).numpy()
        np.testing.assert_array_equal(got, scan_oracle(z, cb))

    def test_tie_breaks_to_lowest_index(self):
        # midpoint of two entries whose per-dim squared differences are
        # elementwise identical, so the tie is exact in floating point
        cb = torch.tensor([
            [10.0, 10.0, 10.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [-10.0, 10.0, -10.0],
        ])
        z = torch.tensor([[0.5, 0.5, 0.0], [0.5, 0.5, 2.0]])
        idx = nearest_code(z, cb)
        assert idx.tolist() == [1, 1]

    def test_idempotent_on_quantized_output(self):
        rng = torch.Generator().manual_seed(1)
        cb = torch.randn(32, 8, generator=rng)
        z = torch.randn(50, 8, generator=rng)
        idx, z_q = quantize(z, cb)
        idx2, _ = quantize(z_q, cb)
        assert torch.equal(idx, idx2)

    @given(scale=st.floats(min_value=1e-3, max_value=1e3), seed=st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_scale_invariance(self, scale, seed):
        rng = torch.Generator().manual_seed(seed)
        cb = torch.randn(16, 4, generator=rng, dtype=torch.float64)
        z = torch.randn(8, 4, generator=rng, dtype=torch.float64)
        assert torch.equal(nearest_code(z, cb), nearest_code(z * scale, cb * scale))

    def test_batched_shape(self):
        cb = torch.randn(16, 4)
        z = torch.randn(3, 5, 2, 4)
        idx, z_q = quantize(z, cb)
        assert idx.shape == (3, 5, 2)
        assert z_q.shape == z.shape

    def test_rejects_dim_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            quantize(torch.randn(2, 3), torch.randn(4, 5))

    def test_rejects_non_finite(self):
        cb = torch.randn(4, 2)
        z = torch.tensor([[float("nan"), 0.0]])
        with pytest.raises(ValueError, match="non-finite"):
            quantize(z, cb)


class TestStraightThrough:
    def test_forward_is_quantized_value(self):
        z = torch.tensor([[0.2, 0.3]])
        z_q = torch.tensor([[1.0, 0.0]])
        assert torch.equal(straight_through(z, z_q), z_q)

    def test_identity_when_equal(self):
        z = torch.randn(4, 3, requires_grad=True)
        out = straight_through(z, z.detach().clone())
        assert torch.equal(out, z.detach())
        out.pow(2).sum().backward()
        assert torch.allclose(z.grad, 2 * z.detach())

    def test_gradient_copies_quantized_path(self):
        # autograd gradient w.r.t. z must equal the finite-difference gradient
        # of the loss w.r.t. the quantized input (the identity pass-through)
        torch.manual_seed(0)
        z = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        z_q = torch.randn(3, 4, dtype=torch.float64)

        def loss_of(quantized):
            return straight_through(z, quantized).pow(2).sum()

        loss_of(z_q).backward()
        eps = 1e-6
        fd = torch.zeros_like(z_q)
        for i in range(z_q.shape[0]):
            for j in range(z_q.shape[1]):
                hi, lo = z_q.clone(), z_q.clone()
                hi[i, j] += eps
                lo[i, j] -= eps
                fd[i, j] = (loss_of(hi) - loss_of(lo)) / (2 * eps)
        assert torch.allclose(z.grad, fd, rtol=1e-6, atol=1e-6)
        assert torch.allclose(z.grad, 2 * z_q)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            straight_through(torch.zeros(2, 2), torch.zeros(3, 2))


class TestVqTerms:
    def test_zero_when_equal(self):
        z = torch.randn(5, 4)
        quant, commit = vq_terms(z, z.clone(), beta=0.25)
        assert quant.item() == 0.0 and commit.item() == 0.0

    def test_unit_distance(self):
        quant, commit = vq_terms(torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 0.0]]), beta=0.25)
        assert quant.item() == pytest.approx(0.25)
        assert commit.item() == pytest.approx(0.25)

    def test_gradient_partition(self):
        # one optimizer step on each term alone must leave the other side untouched
        torch.manual_seed(0)
        enc = torch.nn.Linear(6, 8)
        cb = SharedCodebook(16, 8)
        x = torch.randn(10, 6)

        def snapshot(module):
            return [p.detach().clone() for p in module.parameters()]

        for term_idx, frozen in ((0, enc), (1, cb)):
            opt = torch.optim.SGD(list(enc.parameters()) + list(cb.parameters()), lr=0.1)
            before = snapshot(frozen)
            z = enc(x).unsqueeze(1)
            _, z_q = cb.quantize(z)
            opt.zero_grad()
            vq_terms(z, z_q, beta=0.25)[term_idx].backward()
            opt.step()
            after = snapshot(frozen)
            for a, b in zip(before, after):
                assert torch.equal(a, b)

    def test_zero_iff_equal(self):
        z = torch.randn(3, 4)
        z_q = z.clone()
        z_q[1, 2] += 1e-3
        quant, commit = vq_terms(z, z_q, beta=0.25)
        assert quant.item() > 0 and commit.item() > 0


class TestPosterior:
    def test_equidistant_is_uniform(self):
        cb = torch.tensor([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        probs = code_posterior(torch.zeros(1, 2), cb, temperature=1.0)
        assert torch.allclose(probs, torch.full((1, 4), 0.25))

    def test_low_temperature_concentrates_on_argmin(self):
        rng = torch.Generator().manual_seed(3)
        cb = torch.randn(8, 4, generator=rng)
        z = torch.randn(20, 4, generator=rng)
        probs = code_posterior(z, cb, temperature=1e-6)
        idx = nearest_code(z, cb)
        mass = probs[torch.arange(20), idx]
        assert (mass >= 0.999).all()

    def test_matches_softmax_oracle(self):
        rng = np.random.default_rng(7)
        cb = rng.normal(size=(4, 3))
        z = rng.normal(size=(5, 3))
        probs = code_posterior(torch.from_numpy(z), torch.from_numpy(cb), temperature=1.0).numpy()
        d2 = ((z[:, None, :] - cb[None, :, :]) ** 2).sum(-1)
        expected = np.exp(-d2)
        expected /= expected.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(probs, expected, rtol=1e-10)

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_rows_are_distributions(self, seed):
        rng = torch.Generator().manual_seed(seed)
        cb = torch.randn(12, 5, generator=rng)
        z = 3 * torch.randn(6, 5, generator=rng)
        probs = code_posterior(z, cb, temperature=0.5)
        assert (probs >= 0).all()
        assert torch.allclose(probs.sum(-1), torch.ones(6), atol=1e-6)

    def test_rejects_bad_temperature(self):
        with pytest.raises(ValueError, match="temperature"):
            code_posterior(torch.zeros(1, 2), torch.zeros(3, 2), temperature=0.0)


class TestUsage:
    def test_empty_history(self):
        assert usage_histogram([], 5).tolist() == [0] * 5

    def test_counting(self):
        assert usage_histogram([[0, 0], [1]], 3).tolist() == [2, 1, 0]

    def test_uniform_monte_carlo(self):
        rng = np.random.default_rng(11)
        draws = rng.integers(0, 8, size=100_000)
        counts = usage_histogram([draws], 8)
        assert counts.sum().item() == 100_000
        expected = 12_500
        assert (abs(counts - expected) <= 0.05 * expected).all()

    def test_entropy_bounds(self):
        assert usage_entropy(torch.tensor([10, 10, 10, 10])) == pytest.approx(np.log(4))
        assert usage_entropy(torch.tensor([42, 0, 0, 0])) == 0.0
        assert usage_entropy(torch.zeros(4, dtype=torch.long)) == 0.0

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            usage_histogram([[3]], 3)


class TestSharedCodebook:
    def test_init_range_and_shape(self):
        cb = SharedCodebook(64, 32)
        assert cb.entries.shape == (64, 32)
        assert cb.entries.abs().max().item() <= 1.0 / 64

    def test_revival_resets_dead_codes(self):
        torch.manual_seed(0)
        cb = SharedCodebook(8, 2, revival=True, revival_window=16)
        # only ever use code 0: everything near the origin after this update
        with torch.no_grad():
            cb.entries[0] = torch.tensor([100.0, 100.0])
        batch = 100 + torch.randn(16, 2)
        idx, _ = cb.quantize(batch)
        revived = cb.observe(idx, batch)
        assert revived == 7
        # revived entries now live near the batch
        assert (cb.entries.detach() > 50).all()

    def test_revival_off_by_default(self):
        cb = SharedCodebook(4, 2)
        before = cb.entries.detach().clone()
        idx = torch.zeros(20_000, dtype=torch.long)
        cb.observe(idx, torch.randn(4, 2))
        assert torch.equal(before, cb.entries.detach())
