import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from threatformer_ids import autodiff as ad

from gradcheck import central_difference, relative_error, reverse_mode


def test_softmax_uniform():
    out = ad.softmax(ad.tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.numpy(), [1 / 3] * 3, rtol=1e-7)


def test_softmax_is_stable_for_large_inputs():
    out = ad.softmax(ad.tensor([1000.0, 1000.0]))
    assert torch.isfinite(out).all()


def test_layer_norm_constant_row_is_zero():
    x = ad.tensor([[3.0, 3.0, 3.0, 3.0]])
    out = ad.layer_norm(x, torch.ones(4), torch.zeros(4))
    assert torch.equal(out, torch.zeros(1, 4))


def test_matmul_identity():
    a = ad.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert torch.equal(ad.matmul(a, torch.eye(2)), a)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(torch.zeros(2, 3), torch.zeros(2, 3))


def test_square_derivative():
    x = ad.tensor(3.0, requires_grad=True)
    (g,) = ad.grad(ad.mul(x, x), [x])
    assert float(g) == 6.0


def test_non_scalar_loss_rejected():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ad.grad(x * 2, [x])


def test_unused_leaf_gets_zero_gradient():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    y = ad.tensor([5.0], requires_grad=True)
    gx, gy = ad.grad(ad.sum(x * x), [x, y])
    assert torch.equal(gy, torch.zeros(1)) and torch.equal(gx, 2 * x.detach())


def test_log_is_floored():
    assert torch.isfinite(ad.log(ad.tensor([0.0]))).all()


def test_embedding_gradient_scatters_into_table():
    table = torch.randn(4, 3, requires_grad=True)
    idx = torch.tensor([1, 1, 3])
    (g,) = ad.grad(ad.sum(ad.embedding_lookup(table, idx)), [table])
    np.testing.assert_array_equal(g.numpy()[:, 0], [0, 2, 0, 1])


def test_embedding_rejects_float_indices():
    with pytest.raises(TypeError):
        ad.embedding_lookup(torch.zeros(3, 2), torch.tensor([0.0]))


def test_gradient_of_sum_is_sum_of_gradients(rng):
    x = torch.tensor(rng.normal(size=(4, 5)), dtype=torch.float32, requires_grad=True)
    f1 = lambda t: ad.sum(ad.softmax(t) * 3.0)
    f2 = lambda t: ad.sum(ad.gelu(t) ** 2)
    (g_total,) = ad.grad(f1(x) + f2(x), [x])
    (g1,) = ad.grad(f1(x), [x])
    (g2,) = ad.grad(f2(x), [x])
    np.testing.assert_allclose(g_total.numpy(), (g1 + g2).numpy(), atol=1e-6)


def test_backward_is_bitwise_deterministic(rng):
    x = rng.normal(size=(6, 8)).astype(np.float32)
    w = rng.normal(size=(8, 8)).astype(np.float32)

    def run():
        t = torch.tensor(x, requires_grad=True)
        out = ad.layer_norm(ad.matmul(t, torch.tensor(w)), torch.ones(8), torch.zeros(8))
        return ad.grad(ad.sum(ad.softmax(out) * out), [t])[0].numpy()

    assert np.array_equal(run(), run())


OPS = {
    "matmul": lambda x, r: ad.matmul(x, r["w"]),
    "add": lambda x, r: ad.add(x, r["b"]),
    "mul": lambda x, r: ad.mul(x, r["b"]),
    "gelu": lambda x, r: ad.gelu(x),
    "relu": lambda x, r: ad.relu(x),
    "softmax": lambda x, r: ad.softmax(x, axis=-1),
    "layer_norm": lambda x, r: ad.layer_norm(x, r["gamma"], r["beta"]),
    "sigmoid": lambda x, r: ad.sigmoid(x),
    "log": lambda x, r: ad.log(ad.sigmoid(x)),
    "mean": lambda x, r: ad.mean(x, axis=0),
    "sum": lambda x, r: ad.sum(x, axis=-1),
}


def op_case(name, rows, cols, seed):
    """Scalar function x -> sum(op(x) * R) plus a float32 input point."""
    g = np.random.default_rng(seed)
    x = g.normal(size=(rows, cols))
    if name == "relu":  # keep clear of the kink at 0
        x = np.where(np.abs(x) < 0.05, 0.3, x)
    consts = {"w": g.normal(size=(cols, 3)), "b": g.normal(size=(rows, cols)),
              "gamma": g.normal(size=cols), "beta": g.normal(size=cols)}
    out_shape = OPS[name](torch.zeros(rows, cols, dtype=torch.float64),
                          {k: torch.tensor(v) for k, v in consts.items()}).shape
    proj = g.normal(size=out_shape)

    def fn(t):
        c = {k: torch.tensor(v, dtype=t.dtype) for k, v in consts.items()}
        return ad.sum(OPS[name](t, c) * torch.tensor(proj, dtype=t.dtype))

    return fn, x.astype(np.float32)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(sorted(OPS)), st.integers(1, 8), st.integers(2, 8), st.integers(0, 2**31))
def test_op_gradients_match_finite_differences(name, rows, cols, seed):
    fn, x = op_case(name, rows, cols, seed)
    err = relative_error(reverse_mode(fn, x), central_difference(fn, x))
    assert err < 1e-2, (name, err)


def test_sigmoid_wbce_gradient_tight(rng):
    from threatformer_ids.training import wbce

    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 9))
        x = rng.normal(size=n).astype(np.float32)
        y = torch.tensor(rng.integers(0, 2, size=n))
        w0, w1 = rng.uniform(0.2, 3.0, size=2)
        fn = lambda t: wbce(ad.sigmoid(t), y, float(w0), float(w1))
        worst = max(worst, relative_error(reverse_mode(fn, x), central_difference(fn, x)))
    assert worst < 1e-3


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
def test_softmax_rows_and_layer_norm_means(rows, cols, seed):
    x = torch.tensor(np.random.default_rng(seed).normal(scale=5, size=(rows, cols)), dtype=torch.float32)
    assert torch.allclose(ad.softmax(x).sum(-1), torch.ones(rows), atol=1e-6)
    if cols > 1:
        ln = ad.layer_norm(x, torch.ones(cols), torch.zeros(cols))
        assert ln.mean(-1).abs().max() <= 1e-5
