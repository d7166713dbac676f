import math

import numpy as np
import pytest
import torch

from objgaze.attention import MultiHeadAttention, biased_attention


def reference_attention(q, k, v, bias=None, mask=None):
    """Row-by-row loop with an explicit max-shifted softmax."""
    q, k, v = (np.asarray(t, dtype=np.float64) for t in (q, k, v))
    out = np.zeros((q.shape[0], v.shape[1]))
    weights = np.zeros((q.shape[0], k.shape[0]))
    d = q.shape[1]
    for i in range(q.shape[0]):
        logits = []
        for j in range(k.shape[0]):
            s = sum(q[i, t] * k[j, t] for t in range(d))
            if bias is not None:
                s += bias[i][j]
            logits.append(s / math.sqrt(d))
        keep = [j for j in range(k.shape[0]) if mask is None or not mask[i][j]]
        m = max(logits[j] for j in keep)
        ex = {j: math.exp(logits[j] - m) for j in keep}
        z = sum(ex.values())
        for j in keep:
            weights[i, j] = ex[j] / z
            out[i] += weights[i, j] * v[j]
    return out, weights


def _rand(rng, *shape):
    return torch.as_tensor(rng.standard_normal(shape))


def test_zero_bias_equals_standard_attention():
    rng = np.random.default_rng(0)
    q, k, v = _rand(rng, 5, 8), _rand(rng, 7, 8), _rand(rng, 7, 3)
    plain, _ = biased_attention(q, k, v)
    zero, _ = biased_attention(q, k, v, bias=torch.zeros(5, 7))
    standard = torch.softmax(q @ k.T / math.sqrt(8), dim=-1) @ v
    assert torch.equal(plain, zero)
    assert torch.allclose(plain, standard, atol=1e-12, rtol=0)
    q32, k32, v32 = q.float(), k.float(), v.float()
    torch.testing.assert_close(
        biased_attention(q32, k32, v32, torch.zeros(5, 7))[0],
        torch.softmax(q32 @ k32.T / math.sqrt(8), dim=-1) @ v32,
        atol=1e-7,
        rtol=0,
    )


def test_matches_reference_with_bias_and_mask():
    rng = np.random.default_rng(1)
    q, k, v = _rand(rng, 4, 6), _rand(rng, 5, 6), _rand(rng, 5, 2)
    bias = _rand(rng, 4, 5).abs()
    mask = torch.as_tensor(rng.random((4, 5)) < 0.3)
    mask[:, 0] = False
    out, w = biased_attention(q, k, v, bias, mask)
    ref_out, ref_w = reference_attention(q, k, v, bias.numpy(), mask.numpy())
    np.testing.assert_allclose(out.numpy(), ref_out, atol=1e-12)
    np.testing.assert_allclose(w.numpy(), ref_w, atol=1e-12)
    assert torch.all(w[mask] == 0)


def test_singleton_key_returns_value():
    rng = np.random.default_rng(2)
    q, k, v = _rand(rng, 1, 4), _rand(rng, 1, 4), _rand(rng, 1, 3)
    out, _ = biased_attention(q, k, v, bias=torch.tensor([[5.0]], dtype=torch.float64))
    assert torch.allclose(out, v)


def test_two_key_bias_inside_scaling():
    d_k = 16
    q = torch.zeros(1, d_k, dtype=torch.float64)
    k = torch.randn(2, d_k, dtype=torch.float64)
    v = torch.eye(2, dtype=torch.float64)
    bias = torch.tensor([[math.sqrt(d_k) * math.log(2), 0.0]], dtype=torch.float64)
    _, w = biased_attention(q, k, v, bias)
    np.testing.assert_allclose(w.numpy(), [[2 / 3, 1 / 3]], atol=1e-12)
    # additive-after-scaling variant gives a different split
    _, w2 = biased_attention(q, k, v, bias, scale_bias=False)
    assert w2[0, 0] > 0.9


def test_fully_masked_row_raises_unless_allowed():
    q, k, v = torch.randn(2, 4), torch.randn(3, 4), torch.randn(3, 4)
    mask = torch.tensor([[True, True, True], [False, True, False]])
    with pytest.raises(ValueError):
        biased_attention(q, k, v, mask=mask)
    out, w = biased_attention(q, k, v, mask=mask, allow_empty=True)
    assert torch.all(out[0] == 0) and torch.all(w[0] == 0)
    assert w[1].sum().item() == pytest.approx(1.0)


def test_nonnegative_bias_never_lowers_mass_on_biased_keys():
    rng = np.random.default_rng(3)
    for _ in range(200):
        n_k = int(rng.integers(2, 8))
        q, k, v = _rand(rng, 1, 4), _rand(rng, n_k, 4), _rand(rng, n_k, 2)
        subset = torch.as_tensor(rng.random(n_k) < 0.5)
        bias = torch.where(subset, torch.as_tensor(rng.random(n_k) * 3), torch.zeros(n_k))[None]
        _, w0 = biased_attention(q, k, v)
        _, w1 = biased_attention(q, k, v, bias)
        assert w1[0, subset].sum() >= w0[0, subset].sum() - 1e-12


def test_multihead_shares_bias_across_heads():
    torch.manual_seed(0)
    mha = MultiHeadAttention(8, 2).double()
    x = torch.randn(3, 8, dtype=torch.float64)
    bias = torch.rand(3, 3, dtype=torch.float64)
    _, w = mha(x, x, x, bias)
    assert w.shape == (2, 3, 3)
    np.testing.assert_allclose(w.sum(-1).detach().numpy(), 1.0, atol=1e-12)


def test_multihead_rejects_indivisible_dim():
    with pytest.raises(ValueError):
        MultiHeadAttention(10, 3)
