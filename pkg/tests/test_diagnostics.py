import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qvlab import attention as attn
from qvlab.config import ModelConfig
from qvlab.diagnostics import (
    attention_entropy,
    diffusion_report,
    gradcheck,
    layer_gradcheck,
    rel_error,
    supported_matrix,
)
from qvlab.tensor import Tensor, inject_fault, scale, sum_all


def test_gradcheck_linear():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    rep = gradcheck(lambda: sum_all(scale(x, 3.0)), {"x": x})
    assert rep.max_rel_error < 1e-10
    np.testing.assert_allclose(x.grad, 3.0)
    assert rep.passed and rep.worst == "x" and rep.coords_checked == 12


def test_gradcheck_qkv_layer():
    rep = layer_gradcheck(ModelConfig(d_model=16, heads=2), seq_len=5)
    assert rep.passed and rep.max_rel_error < 1e-4


def test_gradcheck_catches_corrupted_backward():
    with inject_fault("softmax"):
        rep = layer_gradcheck(ModelConfig(d_model=16, heads=2), seq_len=5)
    assert not rep.passed
    assert rep.max_rel_error > 1e-2


def test_gradcheck_samples_large_parameters():
    x = Tensor(np.ones(2000), requires_grad=True)
    rep = gradcheck(lambda: sum_all(scale(x, 2.0)), {"x": x}, max_coords=512)
    assert rep.coords_checked == 512


def test_gradcheck_rejects_non_finite_loss():
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(FloatingPointError):
        gradcheck(lambda: scale(sum_all(x), float("inf")), {"x": x})


def test_rel_error_floor():
    assert rel_error(0.0, 0.0) == 0.0
    assert rel_error(1e-9, 0.0) == pytest.approx(0.1)


def test_support_matrix_enumeration():
    combos = [(c.variant.kind.value, c.pos.kind.value, c.pos.pcm_v) for c in supported_matrix()]
    assert len(combos) == len(set(combos)) == 30
    assert ("QVVV", "SINUSOIDAL", False) not in combos
    assert ("MLA_LITE", "SINUSOIDAL", False) not in combos


# -- entropy ---------------------------------------------------------------

def test_entropy_extremes():
    assert attention_entropy(np.array([[0.0, 1.0, 0.0, 0.0]])) == (0.0, 1.0)
    h, m = attention_entropy(np.full((3, 4), 0.25))
    assert h == pytest.approx(math.log(4), abs=1e-15) and m == 0.25
    assert round(math.log(4), 4) == 1.3863


def test_entropy_scalar_example():
    h, _ = attention_entropy(np.array([[0.5, 0.25, 0.25]]))
    # 0.5 ln 2 + 2 * 0.25 ln 4 = 1.5 ln 2
    assert h == pytest.approx(1.5 * math.log(2), abs=1e-15)
    assert round(h, 4) == 1.0397


def test_entropy_rejects_unnormalized_rows():
    with pytest.raises(ValueError):
        attention_entropy(np.array([[0.5, 0.4]]))
    with pytest.raises(ValueError, match="future"):
        attention_entropy(np.array([[0.5, 0.5], [0.5, 0.5]]), causal=True)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_entropy_bounds(n, seed):
    r = np.random.default_rng(seed)
    a = r.dirichlet(np.full(n, 0.3), size=5)
    h, m = attention_entropy(a)
    assert -1e-12 <= h <= math.log(n) + 1e-12
    assert 1.0 / n - 1e-12 <= m <= 1.0 + 1e-12


def _random_logit_entropy(std, n, draws, rng):
    z = rng.normal(scale=std, size=(draws, n))
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    return float(-(p * np.log(p)).sum(axis=1).mean())


def test_untrained_layer_entropy_matches_random_logit_simulation():
    rng = np.random.default_rng(7)
    T = 12
    for kind in ("QKV", "QV"):
        cfg = ModelConfig(d_model=32, heads=4, causal=False, variant={"kind": kind})
        w = attn.init_layer_weights(cfg, rng)
        x = Tensor(rng.normal(size=(T, 32)))
        out = attn.self_attention(x, w, cfg)
        hs = []
        for i, a in enumerate(out.weights):
            h, _ = attention_entropy(a)
            k = out.cacheables["K" if kind == "QKV" else "V"][i].data
            q = x.data @ w.wq[i].data
            std = float((q @ k.T / math.sqrt(cfg.d_k)).std())
            sim = _random_logit_entropy(std, T, 4000, rng)
            assert abs(h - sim) < 0.1
            hs.append(h)
        assert abs(np.mean(hs) - math.log(T)) < 0.25


def test_diffusion_report_rows():
    w = [np.full((2, 2), 0.5), np.array([[1.0, 0.0], [0.0, 1.0]])]
    rep = diffusion_report("QKV", 10, w, causal=False)
    assert rep.rows() == [("QKV", 0, math.log(2), 0.5, 10), ("QKV", 1, 0.0, 1.0, 10)]
    assert rep.mean_entropy == pytest.approx(math.log(2) / 2)
