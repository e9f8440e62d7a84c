import numpy as np
import pytest
import torch

from medseglatdiff import Codebook, quantize


def exhaustive_nearest(z_flat, entries):
    """Position-by-position scan over every entry."""
    out = []
    for v in z_flat:
        best, best_d = 0, None
        for k, e in enumerate(entries):
            d = float(((v - e) ** 2).sum())
            if best_d is None or d < best_d:
                best, best_d = k, d
        out.append(best)
    return np.array(out)


def test_two_entry_example():
    entries = np.array([[0.0, 0.0], [1.0, 1.0]])
    z = np.array([[[0.9, 0.8]]])
    code = quantize(z, entries)
    # distances 1.45 vs 0.05
    assert code.indices[0, 0] == 1
    assert np.array_equal(code.quantized[0, 0], [1.0, 1.0])


def test_exact_entry_is_fixed_point_and_idempotent():
    rng = np.random.default_rng(0)
    entries = rng.standard_normal((8, 3))
    z = entries[5].reshape(1, 1, 3)
    code = quantize(z, entries)
    assert code.indices[0, 0] == 5
    again = quantize(code.quantized, entries)
    assert np.array_equal(again.quantized, code.quantized)
    assert np.array_equal(again.indices, code.indices)


def test_matches_exhaustive_search_on_random_instances():
    rng = np.random.default_rng(1)
    for _ in range(20):
        k = int(rng.integers(2, 65))
        d = int(rng.integers(1, 9))
        entries = rng.standard_normal((k, d))
        z = rng.standard_normal((5, 4, d))
        code = quantize(z, entries)
        ref = exhaustive_nearest(z.reshape(-1, d), entries).reshape(5, 4)
        assert np.array_equal(code.indices, ref)
        picked = entries[code.indices.reshape(-1)].reshape(z.shape)
        assert np.array_equal(code.quantized, picked)


def test_tie_breaks_to_lowest_index():
    entries = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    z = np.array([[[0.5, 0.5]]])  # equidistant from all three
    assert quantize(z, entries).indices[0, 0] == 0


def test_dimension_mismatch_and_bad_codebook():
    entries = np.zeros((4, 3))
    with pytest.raises(ValueError):
        quantize(np.zeros((2, 2, 2)), entries)
    with pytest.raises(ValueError):
        quantize(np.zeros((2, 2)), entries)
    with pytest.raises(ValueError):
        quantize(np.zeros((2, 2, 3)), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        quantize(np.zeros((2, 2, 1)), np.array([[np.inf], [0.0]]))
    with pytest.raises(ValueError):
        quantize(np.zeros((2, 2, 3)), entries, f=3)  # not a power of two


def test_module_agrees_with_functional_path():
    torch.manual_seed(0)
    cb = Codebook(32, 4)
    z = torch.randn(2, 4, 6, 6, dtype=torch.float64)
    z_q, idx = cb(z)
    for b in range(2):
        code = quantize(z[b].permute(1, 2, 0).numpy(), cb)
        assert np.array_equal(idx[b].numpy(), code.indices)
        assert np.allclose(z_q[b].detach().permute(1, 2, 0).numpy(), code.quantized)


def test_codebook_validation():
    with pytest.raises(ValueError):
        Codebook(1, 4)
    with pytest.raises(ValueError):
        Codebook(8, 0)
    cb = Codebook(8, 4)
    with pytest.raises(ValueError):
        cb.nearest(torch.zeros(3, 5))


def test_straight_through_passes_gradients_unchanged():
    torch.manual_seed(1)
    cb = Codebook(16, 3)
    z = torch.randn(1, 3, 4, 4, requires_grad=True)
    z_q, _ = cb(z)
    z_st = Codebook.straight_through(z, z_q.detach())
    assert torch.equal(z_st, z_q)          # forward value is the quantized one
    (z_st**2).sum().backward()
    assert torch.equal(z.grad, 2 * z_q)    # backward sees the identity map
