import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from multifuture import autodiff as ad
from multifuture import nn_core as nn
from multifuture.autodiff import Var
from multifuture.errors import GradCheckError, NumericError, ShapeError
from multifuture.gridworld import GridSpec, neighbor_list

RNG = np.random.default_rng(7)


# ---------------------------------------------------------------------------
# ParameterStore


def test_store_init_deterministic_and_order_free():
    a = nn.ParameterStore(seed=5)
    a.add("x", (3, 3))
    a.add("y", (2,))
    b = nn.ParameterStore(seed=5)
    b.add("y", (2,))
    b.add("x", (3, 3))
    assert np.array_equal(a["x"].data, b["x"].data)
    assert np.array_equal(a["y"].data, b["y"].data)
    c = nn.ParameterStore(seed=6)
    c.add("x", (3, 3))
    assert not np.array_equal(a["x"].data, c["x"].data)


def test_store_rejects_duplicates_and_bad_values():
    s = nn.ParameterStore()
    s.add("x", (2,))
    with pytest.raises(ShapeError):
        s.add("x", (2,))
    with pytest.raises(ShapeError):
        s.set_value("x", np.zeros(3))
    with pytest.raises(NumericError):
        s.set_value("x", np.array([1.0, np.nan]))


def test_store_astype_round_trip():
    s = nn.ParameterStore(seed=1)
    s.add("x", (4, 2))
    d = s.astype(np.float64)
    assert d["x"].data.dtype == np.float64
    assert np.allclose(d["x"].data, s["x"].data)


# ---------------------------------------------------------------------------
# ConvRNN cell


def make_cell_params(store, name, cin, d):
    store.add(f"{name}.w", (3, 3, cin + d, 4 * d))
    store.add(f"{name}.b", (4 * d,), init="zeros")


def test_convrnn_zero_everything_is_fixed_point():
    store = nn.ParameterStore(dtype=np.float64)
    store.add("w", (3, 3, 5, 12), init="zeros")
    store.add("b", (12,), init="zeros")
    x = Var(np.zeros((4, 4, 2)))
    h = Var(np.zeros((4, 4, 3)))
    c = Var(np.zeros((4, 4, 3)))
    h2, c2 = nn.convrnn_step(x, h, c, Var(store["w"].data), Var(store["b"].data))
    assert np.allclose(h2.data, 0) and np.allclose(c2.data, 0)


def test_convrnn_hidden_bounded():
    store = nn.ParameterStore(seed=2, dtype=np.float64)
    make_cell_params(store, "cell", 2, 3)
    for _ in range(5):
        x = Var(RNG.normal(size=(4, 4, 2)) * 4)
        h = Var(RNG.normal(size=(4, 4, 3)))
        c = Var(RNG.normal(size=(4, 4, 3)) * 3)
        h2, _ = nn.convrnn_step(x, h, c, Var(store["cell.w"].data), Var(store["cell.b"].data))
        assert np.abs(h2.data).max() < 1.0


def test_convrnn_rejects_non_finite():
    store = nn.ParameterStore(dtype=np.float64)
    make_cell_params(store, "cell", 1, 2)
    bad = np.zeros((3, 3, 1))
    bad[0, 0, 0] = np.inf
    with pytest.raises(NumericError):
        nn.convrnn_step(Var(bad), Var(np.zeros((3, 3, 2))), Var(np.zeros((3, 3, 2))),
                        Var(store["cell.w"].data), Var(store["cell.b"].data))


def test_convrnn_gradients():
    store = nn.ParameterStore(seed=3, dtype=np.float64)
    make_cell_params(store, "cell", 2, 3)
    x = RNG.normal(size=(4, 4, 2))
    h0 = RNG.normal(size=(4, 4, 3)) * 0.3
    c0 = RNG.normal(size=(4, 4, 3)) * 0.3

    def frag(tape):
        h, c = nn.convrnn_step(Var(x), Var(h0), Var(c0),
                               tape.var("cell.w"), tape.var("cell.b"))
        return ad.vsum(ad.mul(h, h)) + ad.vmean(c)

    report = nn.grad_check(frag, store, tolerance=1e-4)
    assert report.passed, report.per_param


# ---------------------------------------------------------------------------
# Graph attention layer


def gat_store(d, k, seed=4, out_dim=None):
    store = nn.ParameterStore(seed=seed, dtype=np.float64)
    shapes = nn.gat_params_shapes(d, k)
    if out_dim is not None:
        shapes["w2"] = (shapes["w2"][0], out_dim)
        shapes["b2"] = (out_dim,)
    for name, shape in shapes.items():
        store.add(name, shape)
    return store


def gat_vars(store):
    return {n: Var(store[n].data) for n in ("w1", "b1", "w2", "b2")}


def test_gat_zero_edge_function_is_identity():
    d, k = 3, 2
    store = gat_store(d, k)
    params = {
        "w1": Var(np.zeros((2 * (d + k), d))),
        "b1": Var(np.zeros(d)),
        "w2": Var(np.zeros((d, d))),
        "b2": Var(np.zeros(d)),
    }
    hidden = Var(RNG.normal(size=(3, 3, d)))
    ctx = Var(RNG.normal(size=(3, 3, k)))
    out = nn.gat_layer(hidden, ctx, params, nn.grid_edges(3, 3))
    assert np.array_equal(out.data, hidden.data)


def test_gat_isolated_node_convention():
    # A 1x1 neighbor structure has no edges; the update is the identity.
    d = 4
    hidden = Var(RNG.normal(size=(1, 1, d)))
    out = nn.gat_layer(hidden, None, {}, nn.grid_edges(1, 1))
    assert np.array_equal(out.data, hidden.data)


def test_gat_matches_per_node_loop_oracle():
    d, k = 3, 2
    store = gat_store(d, k)
    hidden = RNG.normal(size=(3, 3, d))
    ctx = RNG.normal(size=(3, 3, k))
    out = nn.gat_layer(Var(hidden), Var(ctx), gat_vars(store), nn.grid_edges(3, 3)).data

    g = GridSpec(3, 3)
    w1, b1 = store["w1"].data, store["b1"].data
    w2, b2 = store["w2"].data, store["b2"].data
    hf = hidden.reshape(9, d)
    cf = ctx.reshape(9, k)
    v = np.concatenate([hf, cf], axis=1)
    expected = np.zeros_like(hf)
    for i in range(9):
        acc = np.zeros(d)
        neighbors = neighbor_list(g, i)
        for j in neighbors:
            pair = np.concatenate([v[i], v[j]])
            acc += np.tanh(pair @ w1 + b1) @ w2 + b2
        expected[i] = acc / len(neighbors) + hf[i]
    assert np.allclose(out.reshape(9, d), expected, atol=1e-9)


def test_gat_gradients_both_modes():
    d, k = 3, 2
    hidden = RNG.normal(size=(3, 3, d)) * 0.5
    ctx = RNG.normal(size=(3, 3, k))
    for mode, out_dim in (("residual", None), ("weighted", 1)):
        store = gat_store(d, k, seed=9, out_dim=out_dim)

        def frag(tape):
            out = nn.gat_layer(
                Var(hidden), Var(ctx),
                {n: tape.var(n) for n in ("w1", "b1", "w2", "b2")},
                nn.grid_edges(3, 3), mode,
            )
            return ad.vsum(ad.mul(out, out))

        report = nn.grad_check(frag, store, tolerance=1e-4)
        assert report.passed, (mode, report.per_param)


def test_gat_weighted_mode_differs_from_residual():
    d, k = 3, 2
    hidden = Var(RNG.normal(size=(3, 3, d)))
    ctx = Var(RNG.normal(size=(3, 3, k)))
    res = nn.gat_layer(hidden, ctx, gat_vars(gat_store(d, k, seed=11)), nn.grid_edges(3, 3))
    wgt = nn.gat_layer(hidden, ctx, gat_vars(gat_store(d, k, seed=11, out_dim=1)),
                       nn.grid_edges(3, 3), mode="weighted")
    assert not np.allclose(res.data, wgt.data)


# ---------------------------------------------------------------------------
# Spatial softmax and belief embedding


def test_spatial_softmax_uniform():
    p = nn.spatial_softmax(Var(np.full((4, 4), 2.5))).data
    assert np.allclose(p, 1.0 / 16)


def test_spatial_softmax_saturation():
    logits = np.zeros((3, 3))
    logits[1, 2] = 50.0
    p = nn.spatial_softmax(Var(logits)).data
    assert p[1, 2] >= 1 - 1e-15


def test_embed_belief_zero_weights_and_locality():
    h, w, de = 3, 4, 5
    belief = np.zeros((h, w))
    belief[1, 2] = 1.0
    out = nn.embed_belief(Var(belief), Var(np.zeros(de)), Var(np.zeros(de))).data
    assert np.allclose(out, 0)

    wv = RNG.normal(size=de)
    bv = RNG.normal(size=de)
    base = nn.embed_belief(Var(belief), Var(wv), Var(bv)).data
    moved = belief.copy()
    moved[1, 2] = 0.0
    moved[0, 0] = 1.0
    out2 = nn.embed_belief(Var(moved), Var(wv), Var(bv)).data
    changed = np.any(base != out2, axis=2)
    assert changed[1, 2] and changed[0, 0] and changed.sum() == 2


def test_embed_belief_matches_loop_oracle():
    belief = RNG.random(size=(3, 3))
    wv = RNG.normal(size=4)
    bv = RNG.normal(size=4)
    out = nn.embed_belief(Var(belief), Var(wv), Var(bv)).data
    for r in range(3):
        for c in range(3):
            assert np.allclose(out[r, c], belief[r, c] * wv + bv, atol=1e-12)


@given(
    arrays(np.float64, (3, 4), elements=st.floats(-100, 100, allow_nan=False))
)
@settings(max_examples=50, deadline=None)
def test_spatial_softmax_distribution_property(logits):
    p = nn.spatial_softmax(Var(logits)).data
    assert p.min() >= 0
    assert abs(p.sum() - 1.0) <= 1e-9


# ---------------------------------------------------------------------------
# grad_check behaviors


def test_grad_check_linear_layer_tight():
    store = nn.ParameterStore(seed=1, dtype=np.float64)
    store.add("w", (3, 2))
    x = RNG.normal(size=(5, 3))
    target = RNG.normal(size=(5, 2))

    def frag(tape):
        err = ad.sub(ad.matmul(Var(x), tape.var("w")), Var(target))
        return ad.vsum(ad.mul(err, err))

    report = nn.grad_check(frag, store, tolerance=1e-4)
    assert report.max_rel_error < 1e-8


def test_grad_check_rejects_non_deterministic_fragment():
    store = nn.ParameterStore(seed=1, dtype=np.float64)
    store.add("w", (3, 2))
    calls = {"n": 0}

    def frag(tape):
        calls["n"] += 1
        w = tape.var("w")
        return ad.mul(ad.vsum(ad.mul(w, w)), 1.0 + 0.01 * (calls["n"] == 1))

    with pytest.raises(GradCheckError):
        nn.grad_check(frag, store)


def test_grad_check_detects_corrupted_gradient():
    store = nn.ParameterStore(seed=1, dtype=np.float64)
    store.add("w", (3, 2))

    def frag_bad(tape):
        w = tape.var("w")
        # The detached copy contributes to the value but not to the tape
        # gradient, so the analytic gradient is off by about one percent.
        detached = Var(w.data * 0.01)
        return ad.vsum(ad.mul(w, w)) + ad.vsum(ad.mul(w, detached))

    report = nn.grad_check(frag_bad, store, tolerance=1e-4)
    assert not report.passed


def test_grad_check_samples_large_params():
    store = nn.ParameterStore(seed=1, dtype=np.float64)
    store.add("w", (20, 20))

    def frag(tape):
        w = tape.var("w")
        return ad.vsum(ad.mul(w, w))

    report = nn.grad_check(frag, store, max_entries_per_param=10)
    assert report.passed
