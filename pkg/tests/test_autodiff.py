"""Finite-difference checks for every primitive plus tape behaviors."""

import numpy as np
import pytest

from multifuture import autodiff as ad
from multifuture.autodiff import Var
from multifuture.errors import NumericError, ShapeError


def fd_grad(f, x, eps=1e-6):
    """Central finite differences of scalar f at array x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        up = f(x)
        flat[k] = orig - eps
        down = f(x)
        flat[k] = orig
        gf[k] = (up - down) / (2 * eps)
    return g


def check_op(build, x0, rtol=1e-6, atol=1e-8):
    """build(Var) -> scalar Var; compares backward against FD."""
    x = np.array(x0, dtype=np.float64)
    v = Var(x.copy(), requires_grad=True)
    loss = build(v)
    ad.backward(loss)
    numeric = fd_grad(lambda arr: float(build(Var(arr)).data), x.copy())
    assert np.allclose(v.grad, numeric, rtol=rtol, atol=atol), (
        f"analytic {v.grad} vs numeric {numeric}"
    )


RNG = np.random.default_rng(1234)


def test_add_mul_broadcast_grads():
    a = RNG.normal(size=(3, 4))
    b = RNG.normal(size=(4,))
    va = Var(a.copy(), requires_grad=True)
    vb = Var(b.copy(), requires_grad=True)
    loss = ad.vsum(ad.mul(ad.add(va, vb), va))
    ad.backward(loss)
    assert np.allclose(va.grad, 2 * a + b)
    assert np.allclose(vb.grad, a.sum(axis=0))


@pytest.mark.parametrize(
    "name,build",
    [
        ("tanh", lambda v: ad.vsum(ad.tanh(v))),
        ("sigmoid", lambda v: ad.vsum(ad.sigmoid(v))),
        ("exp", lambda v: ad.vsum(ad.exp(v))),
        ("smooth_l1", lambda v: ad.vsum(ad.smooth_l1(v))),
        ("mean", lambda v: ad.vmean(ad.mul(v, v))),
        ("reciprocal", lambda v: ad.vsum(ad.reciprocal(ad.add(ad.mul(v, v), 2.0)))),
        ("softmax", lambda v: ad.vsum(ad.mul(ad.softmax_flat(v), Var(np.arange(6.0).reshape(2, 3))))),
        ("reshape", lambda v: ad.vsum(ad.mul(ad.reshape(v, (6,)), Var(np.arange(6.0))))),
    ],
)
def test_elementwise_grads(name, build):
    check_op(build, RNG.normal(size=(2, 3)) * 1.5)


def test_log_clamp_grads():
    x = np.abs(RNG.normal(size=(2, 3))) + 0.5
    check_op(lambda v: ad.vsum(ad.log(ad.clamp_min(v, 1e-12))), x)


def test_clamp_min_blocks_gradient_below_floor():
    v = Var(np.array([0.5, -2.0]), requires_grad=True)
    ad.backward(ad.vsum(ad.clamp_min(v, 0.0)))
    assert np.allclose(v.grad, [1.0, 0.0])


def test_matmul_grads():
    a = RNG.normal(size=(3, 4))
    b = RNG.normal(size=(4, 2))
    va = Var(a.copy(), requires_grad=True)
    vb = Var(b.copy(), requires_grad=True)
    ad.backward(ad.vsum(ad.mul(ad.matmul(va, vb), ad.matmul(Var(a), Var(b)))))
    numeric_a = fd_grad(lambda arr: float((arr @ b * (a @ b)).sum()), a.copy())
    assert np.allclose(va.grad, numeric_a, rtol=1e-6, atol=1e-8)


def test_concat_getitem_grads():
    def build(v):
        joined = ad.concat([v, ad.mul(v, 2.0)], axis=1)
        return ad.vsum(ad.mul(joined[:, 1:3], joined[:, 1:3]))

    check_op(build, RNG.normal(size=(2, 2)))


def test_gather_segment_grads():
    idx = np.array([0, 0, 1, 2, 2, 2])

    def build(v):
        rows = ad.gather_rows(v, idx)
        summed = ad.segment_sum(ad.mul(rows, rows), idx, 3)
        return ad.vsum(ad.mul(summed, Var(np.arange(6.0).reshape(3, 2))))

    check_op(build, RNG.normal(size=(3, 2)))


def test_segment_sum_sorted_fast_path_matches():
    idx = np.array([0, 0, 1, 2, 2, 2])
    starts = np.array([0, 2, 3])
    x = RNG.normal(size=(6, 2))
    a = ad.segment_sum(Var(x), idx, 3)
    b = ad.segment_sum(Var(x), idx, 3, starts)
    assert np.allclose(a.data, b.data)
    # Gather fast path needs the index to cover every source row.
    src = RNG.normal(size=(3, 2))
    coef = Var(np.arange(12.0).reshape(6, 2))
    va = Var(src.copy(), requires_grad=True)
    ad.backward(ad.vsum(ad.mul(ad.gather_rows(va, idx, starts), coef)))
    vb = Var(src.copy(), requires_grad=True)
    ad.backward(ad.vsum(ad.mul(ad.gather_rows(vb, idx), coef)))
    assert np.allclose(va.grad, vb.grad)


def test_conv2d_matches_nested_loop_reference():
    x = RNG.normal(size=(5, 5, 2))
    w = RNG.normal(size=(3, 3, 2, 4))
    b = RNG.normal(size=(4,))
    out = ad.conv2d(Var(x), Var(w), Var(b)).data

    ref = np.zeros((5, 5, 4))
    for r in range(5):
        for c in range(5):
            for o in range(4):
                acc = b[o]
                for dr in range(3):
                    for dc in range(3):
                        rr, cc = r + dr - 1, c + dc - 1
                        if 0 <= rr < 5 and 0 <= cc < 5:
                            for ci in range(2):
                                acc += x[rr, cc, ci] * w[dr, dc, ci, o]
                ref[r, c, o] = acc
    assert np.allclose(out, ref, atol=1e-6)


def test_conv2d_one_by_one_equals_cellwise_dense():
    x = RNG.normal(size=(4, 3, 5))
    w = RNG.normal(size=(1, 1, 5, 2))
    out = ad.conv2d(Var(x), Var(w)).data
    assert np.allclose(out, (x.reshape(-1, 5) @ w[0, 0]).reshape(4, 3, 2), atol=1e-12)


def test_conv2d_grads():
    x0 = RNG.normal(size=(4, 4, 2))
    w0 = RNG.normal(size=(3, 3, 2, 3))
    b0 = RNG.normal(size=(3,))
    coef = Var(RNG.normal(size=(4, 4, 3)))

    vx, vw, vb = Var(x0.copy(), True), Var(w0.copy(), True), Var(b0.copy(), True)
    ad.backward(ad.vsum(ad.mul(ad.conv2d(vx, vw, vb), coef)))

    def loss_at(x=None, w=None, b=None):
        return float(
            (ad.conv2d(Var(x0 if x is None else x), Var(w0 if w is None else w),
                       Var(b0 if b is None else b)).data * coef.data).sum()
        )

    assert np.allclose(vx.grad, fd_grad(lambda a: loss_at(x=a), x0.copy()), rtol=1e-6, atol=1e-8)
    assert np.allclose(vw.grad, fd_grad(lambda a: loss_at(w=a), w0.copy()), rtol=1e-6, atol=1e-8)
    assert np.allclose(vb.grad, fd_grad(lambda a: loss_at(b=a), b0.copy()), rtol=1e-6, atol=1e-8)


def test_conv2d_shape_errors():
    with pytest.raises(ShapeError, match="channel mismatch"):
        ad.conv2d(Var(np.zeros((3, 3, 2))), Var(np.zeros((3, 3, 3, 1))))
    with pytest.raises(ShapeError, match="odd-sized"):
        ad.conv2d(Var(np.zeros((3, 3, 2))), Var(np.zeros((2, 2, 2, 1))))


def test_avg_pool_grads():
    def build(v):
        return ad.vsum(ad.mul(ad.avg_pool2d(v, (2, 2)), Var(np.arange(8.0).reshape(2, 2, 2))))

    check_op(build, RNG.normal(size=(4, 4, 2)))


def test_avg_pool_values():
    x = np.arange(16.0).reshape(4, 4, 1)
    out = ad.avg_pool2d(Var(x), (2, 2)).data
    assert np.allclose(out[0, 0, 0], (0 + 1 + 4 + 5) / 4)


def test_softmax_is_distribution_and_shift_invariant():
    x = RNG.normal(size=(4, 4)) * 3
    p = ad.softmax_flat(Var(x)).data
    assert p.min() >= 0 and abs(p.sum() - 1) < 1e-12
    p2 = ad.softmax_flat(Var(x + 17.3)).data
    assert np.allclose(p, p2, atol=1e-12)


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        ad.softmax_flat(Var(np.array([[1.0, np.nan]])))


def test_no_grad_builds_no_tape():
    v = Var(np.ones(3), requires_grad=True)
    with ad.no_grad():
        out = ad.mul(v, v)
    assert out._parents == ()
    out2 = ad.mul(v, v)
    assert out2._parents != ()


def test_shared_subexpression_accumulates():
    v = Var(np.array([3.0]), requires_grad=True)
    y = ad.mul(v, v)  # used twice below
    loss = ad.vsum(ad.add(y, y))
    ad.backward(loss)
    assert np.allclose(v.grad, [12.0])


def test_backward_requires_scalar():
    v = Var(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        ad.backward(ad.mul(v, 2.0))


def test_mixed_dtype_rejected():
    a = Var(np.ones(3, dtype=np.float32))
    b = Var(np.ones(3, dtype=np.float64))
    with pytest.raises(ShapeError):
        ad.add(a, b)


def test_deep_chain_does_not_recurse():
    v = Var(np.array([1.0]), requires_grad=True)
    out = v
    for _ in range(5000):
        out = ad.mul(out, 1.0)
    ad.backward(ad.vsum(out))
    assert np.allclose(v.grad, [1.0])
