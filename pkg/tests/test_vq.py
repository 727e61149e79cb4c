import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vq_sign.vq import (Codebook, GumbelSchedule, dead_code_threshold, diversity_loss, perplexity, quantize_gumbel,
                        quantize_hard, reinit_dead_codes, straight_through, with_forced)


def book_from(rows, dtype=torch.float64):
    rows = torch.as_tensor(rows, dtype=dtype)
    b = Codebook(rows.shape[0], rows.shape[1])
    with torch.no_grad():
        b.weight.data = rows.clone()
    b.usage_counts.zero_()
    return b


def brute_force_nn(z: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Exhaustive search in float64 with an explicit lowest-index tie rule."""
    out = np.empty(len(z), dtype=np.int64)
    for i, row in enumerate(z):
        best, best_d = 0, math.inf
        for j, c in enumerate(codes):
            d = float(np.sum((row - c) ** 2))
            if d < best_d:
                best, best_d = j, d
        out[i] = best
    return out


def test_codebook_init_and_reserve():
    gen = torch.Generator().manual_seed(0)
    b = Codebook(200, 32, generator=gen)
    assert b.weight.shape == (200, 32)
    assert float(b.weight.detach().abs().max()) <= 1 / 200
    b.reserve("a", 0, 8)
    b.reserve("b", 8, 12)
    with pytest.raises(ValueError):
        b.reserve("c", 10, 14)
    with pytest.raises(ValueError):
        b.reserve("d", 190, 201)
    with pytest.raises(ValueError):
        Codebook(0, 4)


def test_exact_match_row():
    gen = torch.Generator().manual_seed(1)
    b = Codebook(16, 4, generator=gen).double()
    z = b.weight.detach()[7:8].clone()
    out = quantize_hard(z, b)
    assert out.indices.item() == 7
    assert out.loss_codebook.item() == 0.0 and out.loss_commit.item() == 0.0


def test_two_code_geometry_and_ties():
    b = book_from([[0.0, 0.0], [1.0, 0.0]])
    z = torch.tensor([[0.4, 0.0], [0.6, 0.0], [0.5, 0.0]], dtype=torch.float64)
    assert quantize_hard(z, b).indices.tolist() == [0, 1, 0]


def test_hard_matches_oracle():
    rng = np.random.default_rng(0)
    codes = rng.normal(size=(200, 32)).astype(np.float32)
    z = rng.normal(size=(300, 32)).astype(np.float32)
    b = book_from(codes, dtype=torch.float32)
    got = quantize_hard(torch.from_numpy(z), b).indices.numpy()
    np.testing.assert_array_equal(got, brute_force_nn(z.astype(np.float64), codes.astype(np.float64)))


def test_hard_outcome_invariants():
    gen = torch.Generator().manual_seed(2)
    b = Codebook(50, 8, generator=gen)
    z = torch.randn(64, 8, generator=gen) * 0.05
    out = quantize_hard(z, b)
    assert torch.equal(out.z_q, b.weight.detach()[out.indices])
    assert 1.0 <= out.perplexity <= 50
    assert 0.0 <= out.loss_diversity.item() <= 1.0
    assert int(b.usage_counts.sum()) == 64
    again = quantize_hard(out.z_q, b, update_usage=False)
    assert torch.equal(again.indices, out.indices)
    np.testing.assert_allclose(out.loss_codebook.item(), ((out.z_q - z) ** 2).mean().item(), rtol=1e-6)
    with pytest.raises(ValueError):
        quantize_hard(torch.zeros(3, 7), b)


def test_losses_route_gradients():
    gen = torch.Generator().manual_seed(3)
    b = Codebook(10, 4, generator=gen).double()
    z = torch.randn(6, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    out = quantize_hard(z, b)
    out.loss_codebook.backward()
    assert z.grad is None or torch.all(z.grad == 0)
    assert b.weight.grad.abs().sum() > 0
    b.weight.grad = None
    out = quantize_hard(z, b)
    out.loss_commit.backward()
    assert b.weight.grad is None or torch.all(b.weight.grad == 0)
    assert z.grad.abs().sum() > 0


def test_shared_codebook_aliasing():
    gen = torch.Generator().manual_seed(4)
    shared = Codebook(12, 3, streams=("LH", "RH"), generator=gen)
    views = {"LH": shared, "RH": shared}
    z = torch.randn(5, 3, generator=gen)
    with torch.no_grad():
        views["LH"].weight[quantize_hard(z, views["LH"]).indices[0]] = z[0]
    assert quantize_hard(z[:1], views["RH"]).indices[0] == quantize_hard(z[:1], views["LH"]).indices[0]
    assert torch.equal(views["RH"].weight, views["LH"].weight)


def test_gumbel_low_temperature_matches_hard():
    gen = torch.Generator().manual_seed(5)
    b = Codebook(30, 6, generator=gen)
    z = torch.randn(100, 6, generator=gen) * 0.05
    hard = quantize_hard(z, b, update_usage=False).indices
    soft = quantize_gumbel(z, b, 1e-6, torch.Generator().manual_seed(0), update_usage=False).indices
    assert torch.equal(hard, soft)


def test_gumbel_determinism_and_snap():
    gen = torch.Generator().manual_seed(6)
    b = Codebook(30, 6, generator=gen)
    z = torch.randn(40, 6, generator=gen) * 0.05
    a = quantize_gumbel(z, b, 0.7, torch.Generator().manual_seed(9), update_usage=False)
    c = quantize_gumbel(z, b, 0.7, torch.Generator().manual_seed(9), update_usage=False)
    assert torch.equal(a.indices, c.indices)
    assert torch.equal(a.z_q, b.weight.detach()[a.indices])
    with pytest.raises(ValueError):
        quantize_gumbel(z, b, 0.0)


def test_gumbel_equal_distances_frequency():
    b = book_from([[1.0, 0.0], [-1.0, 0.0]])
    z = torch.zeros(10_000, 2, dtype=torch.float64)
    out = quantize_gumbel(z, b, 5.0, torch.Generator().manual_seed(0))
    freq = out.indices.double().mean().item()
    assert abs(freq - 0.5) < 0.05


def test_gumbel_sampling_distribution():
    """Selection frequencies follow softmax(-d / tau)."""
    b = book_from([[0.0], [1.0], [2.0]])
    z = torch.full((40_000, 1), 0.4, dtype=torch.float64)
    tau = 0.8
    out = quantize_gumbel(z, b, tau, torch.Generator().manual_seed(1))
    d = torch.tensor([0.16, 0.36, 2.56], dtype=torch.float64)
    expected = torch.softmax(-d / tau, 0).numpy()
    freq = np.bincount(out.indices.numpy(), minlength=3) / 40_000
    np.testing.assert_allclose(freq, expected, atol=0.01)


def test_gumbel_gradient_reaches_codebook_and_encoder():
    gen = torch.Generator().manual_seed(7)
    b = Codebook(8, 3, generator=gen).double()
    z = torch.randn(5, 3, generator=gen, dtype=torch.float64, requires_grad=True)
    out = quantize_gumbel(z, b, 0.5, gen)
    out.z_q.sum().backward()
    assert b.weight.grad.abs().sum() > 0
    assert z.grad.abs().sum() > 0


def test_schedule():
    s = GumbelSchedule(1.0, 0.1, 100.0)
    taus = [s.temperature(t) for t in range(0, 1000, 10)]
    assert taus[0] == 1.0 and taus[-1] == 0.1
    assert all(b <= a for a, b in zip(taus, taus[1:]))
    assert math.isclose(s.temperature(100), math.exp(-1))
    assert s.advance() == 1.0 and s.current_step == 1
    with pytest.raises(ValueError):
        GumbelSchedule(0.1, 1.0)


def test_straight_through_linear_and_quadratic():
    z_e = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    z_q = torch.randn(4, 3, dtype=torch.float64)
    out = straight_through(z_e, z_q)
    assert torch.equal(out, z_q)
    out.sum().backward()
    assert torch.equal(z_e.grad, torch.ones_like(z_e))
    z_e.grad = None
    target = torch.randn(4, 3, dtype=torch.float64)
    ((straight_through(z_e, z_q) - target) ** 2).sum().backward()
    torch.testing.assert_close(z_e.grad, 2 * (z_q - target))
    with pytest.raises(ValueError):
        straight_through(z_e, z_q[:2])


def test_diversity_examples():
    one_hot = torch.zeros(5, 4)
    one_hot[:, 2] = 1
    assert diversity_loss(one_hot).item() == pytest.approx(1.0)
    assert diversity_loss(torch.full((3, 4), 0.25)).item() == pytest.approx(0.0, abs=1e-7)
    p = torch.tensor([[1.0, 0, 0, 0], [0, 1.0, 0, 0]], dtype=torch.float64)
    assert diversity_loss(p).item() == pytest.approx(1 - math.log(2) / math.log(4))
    with pytest.raises(ValueError):
        diversity_loss(torch.full((2, 4), 0.3))


def test_perplexity_examples():
    assert perplexity([5, 0, 0]) == 1.0
    assert perplexity(np.ones(200)) == pytest.approx(200.0)
    h = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
    assert perplexity([3, 1, 0, 0]) == pytest.approx(math.exp(h))
    assert perplexity([3, 1, 0, 0]) == pytest.approx(1.7548, abs=1e-4)
    with pytest.raises(ValueError):
        perplexity([0, 0])


@settings(max_examples=60)
@given(st.lists(st.integers(0, 50), min_size=1, max_size=40))
def test_perplexity_bounds(counts):
    if sum(counts) == 0:
        return
    assert 1.0 <= perplexity(counts) <= len(counts)


def test_dead_code_threshold():
    assert dead_code_threshold(10, 200) == 1.0
    assert dead_code_threshold(960_000, 200) == pytest.approx(48.0)


def test_reinit_none_dead():
    b = Codebook(4, 2)
    b.usage_counts.fill_(10)
    before = b.weight.detach().clone()
    assert reinit_dead_codes(b, torch.randn(16, 2), threshold=5) == 0
    assert torch.equal(b.weight.detach(), before)


def test_reinit_constant_sample():
    b = Codebook(4, 2)
    b.usage_counts.copy_(torch.tensor([9, 0, 9, 9]))
    v = torch.tensor([0.25, -1.5])
    assert reinit_dead_codes(b, v.expand(10, 2), threshold=1) == 1
    assert torch.equal(b.weight.detach()[1], v)


def test_reinit_matches_recomputation():
    b = Codebook(20, 5, generator=torch.Generator().manual_seed(0))
    counts = torch.full((20,), 50)
    dead = [1, 4, 9, 13, 19]
    counts[dead] = torch.tensor([0, 2, 1, 3, 0])
    b.usage_counts.copy_(counts)
    sample = torch.randn(30, 5, generator=torch.Generator().manual_seed(1))
    alive = b.weight.detach()[[i for i in range(20) if i not in dead]].clone()
    assert reinit_dead_codes(b, sample, threshold=4, generator=torch.Generator().manual_seed(2)) == 5
    oracle = torch.Generator().manual_seed(2)
    for j in dead:
        pick = torch.randperm(30, generator=oracle)[:8]
        assert len(set(pick.tolist())) == 8
        torch.testing.assert_close(b.weight.detach()[j], sample[pick].sum(0) / 8, rtol=1e-6, atol=1e-7)
    assert torch.equal(b.weight.detach()[[i for i in range(20) if i not in dead]], alive)
    assert b.usage_counts[dead].sum() == 0 and torch.all(b.usage_counts[[0, 2, 3]] == 50)
    with pytest.raises(ValueError):
        reinit_dead_codes(b, sample[:7], threshold=4)


def test_with_forced_recomputes_losses():
    b = Codebook(10, 3, generator=torch.Generator().manual_seed(3)).double()
    z = torch.randn(6, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(4))
    out = quantize_hard(z, b, update_usage=False)
    forced_idx = torch.full((6,), 9)
    mask = torch.tensor([True, False, True, False, False, True])
    f = with_forced(out, b, forced_idx, mask)
    expect = torch.where(mask, forced_idx, out.indices)
    assert torch.equal(f.indices, expect)
    assert torch.equal(f.z_q, b.weight.detach()[expect])
    sel = b.weight.detach()[expect]
    assert f.loss_codebook.item() == pytest.approx(((sel - z) ** 2).mean().item())
    assert f.loss_commit.item() == pytest.approx(((z - sel) ** 2).mean().item())
    assert torch.equal(f.forced_mask, mask)
