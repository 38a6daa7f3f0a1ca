import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from jepalab import numerics as nx


def test_matmul_identity(gen):
    A = torch.randn(2, 2, generator=gen)
    assert torch.equal(nx.matmul(torch.eye(2), A), A)


def test_matmul_shape_error_names_op_and_shapes():
    with pytest.raises(nx.ShapeError) as err:
        nx.matmul(torch.zeros(2, 3), torch.zeros(2, 3))
    assert "matmul" in str(err.value)
    assert err.value.shapes == [(2, 3), (2, 3)]


def test_residual_add_shape_mismatch():
    with pytest.raises(nx.ShapeError):
        nx.residual_add(torch.zeros(2, 4), torch.zeros(2, 5))


def test_layer_norm_constant_row_is_zero():
    out = nx.layer_norm(torch.full((3, 8), 7.25))
    assert torch.equal(out, torch.zeros(3, 8))


def test_layer_norm_matches_hand_formula(gen):
    x = torch.randn(5, 16, generator=gen, dtype=torch.float64)
    w = torch.randn(16, generator=gen, dtype=torch.float64)
    b = torch.randn(16, generator=gen, dtype=torch.float64)
    xn = x.numpy()
    mu = xn.mean(-1, keepdims=True)
    var = ((xn - mu) ** 2).mean(-1, keepdims=True)
    expect = (xn - mu) / np.sqrt(var + nx.LN_EPS) * w.numpy() + b.numpy()
    np.testing.assert_allclose(nx.layer_norm(x, w, b).numpy(), expect, rtol=1e-12, atol=1e-12)


def test_avgpool1d_drops_remainder():
    x = torch.tensor([[1.0], [2.0], [3.0], [4.0], [5.0]])
    assert nx.avgpool1d(x, 2).reshape(-1).tolist() == [1.5, 3.5]


def test_avgpool1d_kernel_larger_than_input_gives_no_windows():
    assert nx.avgpool1d(torch.zeros(3, 2), 4).shape == (0, 2)
    with pytest.raises(nx.ShapeError):
        nx.avgpool1d(torch.zeros(3, 2), 0)


def test_avgpool2d_window_means():
    grid = torch.arange(16, dtype=torch.float64).reshape(4, 4, 1)
    out = nx.avgpool2d(grid, 2, 2).reshape(2, 2)
    expect = [[(0 + 1 + 4 + 5) / 4, (2 + 3 + 6 + 7) / 4], [(8 + 9 + 12 + 13) / 4, (10 + 11 + 14 + 15) / 4]]
    assert out.tolist() == expect


def _attention_oracle(q, k, v, heads, valid=None):
    B, L, d = q.shape
    hd = d // heads
    out = np.zeros((B, L, d))
    for b in range(B):
        for h in range(heads):
            sl = slice(h * hd, (h + 1) * hd)
            s = q[b, :, sl] @ k[b, :, sl].T / math.sqrt(hd)
            if valid is not None:
                s = np.where(valid[b][None, :], s, -np.inf)
            s = np.exp(s - s.max(-1, keepdims=True))
            s /= s.sum(-1, keepdims=True)
            out[b, :, sl] = s @ v[b, :, sl]
    return out


def test_attention_matches_loop_oracle(gen):
    q, k, v = (torch.randn(2, 5, 8, generator=gen, dtype=torch.float64) for _ in range(3))
    valid = torch.tensor([[True] * 5, [True, True, True, False, False]])
    got = nx.attention(q, k, v, 2, valid).numpy()
    want = _attention_oracle(q.numpy(), k.numpy(), v.numpy(), 2, valid.numpy())
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


def test_attention_padding_does_not_leak(gen):
    q, k, v = (torch.randn(1, 4, 8, generator=gen) for _ in range(3))
    valid = torch.tensor([[True, True, True, False]])
    k2, v2 = k.clone(), v.clone()
    k2[0, 3] += 100.0
    v2[0, 3] -= 100.0
    a = nx.attention(q, k, v, 2, valid)
    b = nx.attention(q, k2, v2, 2, valid)
    assert torch.allclose(a[0, :3], b[0, :3])


def test_softmax_rows_sum_to_one(gen):
    x = torch.randn(3, 7, generator=gen)
    assert torch.allclose(nx.softmax(x).sum(-1), torch.ones(3))


def test_concat_and_gather():
    a, b = torch.zeros(2, 3), torch.ones(1, 3)
    cat = nx.concat_seq([a, b])
    assert cat.shape == (3, 3)
    assert torch.equal(nx.gather_rows(cat, [2, 0]), torch.stack([b[0], a[0]]))
    with pytest.raises(nx.ShapeError):
        nx.concat_seq([torch.zeros(2, 3), torch.zeros(2, 4)])


def test_seq_mean_ignores_padding():
    x = torch.tensor([[[1.0], [3.0], [100.0]]])
    valid = torch.tensor([[True, True, False]])
    assert nx.seq_mean(x, valid).item() == 2.0


def test_check_finite_raises_and_can_be_disabled():
    bad = torch.tensor([1.0, float("nan")])
    with pytest.raises(nx.NonFiniteError, match="here"):
        nx.check_finite(bad, "here")
    with nx.finite_checks(False):
        nx.check_finite(bad, "here")
    with pytest.raises(nx.NonFiniteError):
        nx.check_finite(bad, "again")


def test_linear_sum_gradient_is_outer_product(gen):
    x = torch.randn(3, 4, generator=gen, dtype=torch.float64)
    W = torch.randn(2, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    loss = nx.linear(x, W).sum()
    nx.backward(loss)
    # d/dW sum(x W^T) = 1 x^T summed over rows
    expect = torch.ones(3, 2, dtype=torch.float64).T @ x
    assert torch.allclose(W.grad, expect)
    err = nx.grad_check(lambda P: nx.linear(x, P["W"]).sum(), {"W": W.detach()})
    assert err < 1e-8


def test_unreachable_parameter_has_zero_gradient():
    used = nn.Parameter(torch.ones(3))
    unused = nn.Parameter(torch.ones(3))
    store = nx.ParamStore([("used", used), ("unused", unused)])
    nx.backward((used * 2).sum())
    assert torch.equal(store.grad("unused"), torch.zeros(3))
    assert torch.equal(store.grad("used"), torch.full((3,), 2.0))


def test_backward_twice_raises():
    p = nn.Parameter(torch.ones(2))
    loss = (p * p).sum()
    nx.backward(loss)
    with pytest.raises(nx.BackwardError):
        nx.backward(loss)


def test_param_store_rejects_duplicates_and_counts():
    a = nn.Parameter(torch.zeros(2, 3))
    with pytest.raises(ValueError):
        nx.ParamStore([("a", a), ("a", a)])
    store = nx.ParamStore([("a", a), ("b", nn.Parameter(torch.zeros(4)))])
    assert store.numel() == 10
    assert list(store) == ["a", "b"]


def _mlp_fn(x):
    def fn(P):
        h = nx.gelu(nx.linear(x, P["w1"], P["b1"]))
        return (nx.linear(h, P["w2"], P["b2"]) ** 2).mean()

    return fn


def test_grad_check_two_layer_mlp():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(6, 5, generator=g, dtype=torch.float64)
    P = {
        "w1": torch.randn(7, 5, generator=g, dtype=torch.float64),
        "b1": torch.randn(7, generator=g, dtype=torch.float64),
        "w2": torch.randn(3, 7, generator=g, dtype=torch.float64),
        "b2": torch.randn(3, generator=g, dtype=torch.float64),
    }
    assert nx.grad_check(_mlp_fn(x), P, eps=1e-5) < 1e-6


def test_grad_check_vmapped_path_matches_loop():
    g = torch.Generator().manual_seed(1)
    x = torch.randn(4, 3, generator=g, dtype=torch.float64)
    P = {"w1": torch.randn(5, 3, generator=g, dtype=torch.float64), "b1": torch.zeros(5, dtype=torch.float64),
         "w2": torch.randn(2, 5, generator=g, dtype=torch.float64), "b2": torch.zeros(2, dtype=torch.float64)}
    loop = nx.grad_check_report(_mlp_fn(x), P, chunk=1)
    batched = nx.grad_check_report(_mlp_fn(x), P, chunk=4)
    for name in P:
        assert abs(loop[name] - batched[name]) < 1e-8


def test_grad_check_detects_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x**2

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3 * x  # true derivative is 2x

    err = nx.grad_check(lambda P: Wrong.apply(P["x"]).sum(), {"x": torch.tensor([1.0, 2.0], dtype=torch.float64)})
    assert err > 0.1


def test_grad_check_all_stop_gradient_passes_trivially():
    err = nx.grad_check(lambda P: P["w"].detach().sum() * 0 + 1.0 + P["w"].sum() * 0, {"w": torch.ones(3)})
    assert err == 0.0


def test_grad_check_tiny_vit():
    from jepalab.model import Transformer

    torch.manual_seed(0)
    net = Transformer(16, 2, 2, 2.0).double()
    x = torch.randn(1, 5, 16, dtype=torch.float64)
    # near init the attention logits are ~0 and q/k gradients sit at the
    # finite-difference noise floor, so check at a generic point instead
    g = torch.Generator().manual_seed(1)
    params = {n: p.detach() + 0.2 * torch.randn(p.shape, generator=g, dtype=p.dtype) for n, p in net.named_parameters()}

    def fn(P):
        return (torch.func.functional_call(net, P, (x,)) ** 2).mean()

    assert nx.grad_check(fn, params, eps=1e-5, chunk=64) < 1e-4


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 20), kernel=st.integers(1, 6))
def test_avgpool1d_length_property(n, kernel):
    x = torch.arange(n, dtype=torch.float64)[:, None]
    out = nx.avgpool1d(x, kernel)
    assert out.shape[0] == n // kernel
    for i in range(n // kernel):
        assert out[i, 0].item() == pytest.approx(np.mean(range(i * kernel, (i + 1) * kernel)))
