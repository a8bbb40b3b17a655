import numpy as np
import pytest

from latentfluid import layers, tape
from latentfluid.errors import ContractViolation
from latentfluid.gradsuite import model_checks
from latentfluid.params import ParamStore
from latentfluid.spatial import NeighborList
from latentfluid.tape import Tensor, gradcheck


# -- radial window -----------------------------------------------------------


def test_window_values():
    R = 0.8
    assert layers.window_eval("poly6-cubic", 0.0, R) == 1.0
    assert layers.window_eval("poly6-cubic", R, R) == 0.0
    assert layers.window_eval("poly6-cubic", 2.0 * R, R) == 0.0
    got = layers.window_eval("poly6-cubic", R / np.sqrt(2.0), R)
    assert got == pytest.approx(0.125, abs=1e-12)
    assert np.all(layers.window_eval("none", np.linspace(0, 2, 5), R) == 1.0)


def test_window_smooth_at_support_edge():
    R = 0.5
    h = 1e-6
    # value and one-sided derivatives both ~0 at d = R: C1 junction
    inner = layers.window_eval("poly6-cubic", R - h, R)
    outer = layers.window_eval("poly6-cubic", R + h, R)
    assert inner < 1e-10 and outer == 0.0
    assert abs(inner - 0.0) / h < 1e-4  # slope magnitude -> 0

    d = np.linspace(0.0, R, 100)
    w = layers.window_eval("poly6-cubic", d, R)
    assert np.all(np.diff(w) <= 1e-15)  # monotone nonincreasing


# -- positional encoding -------------------------------------------------------


def test_posenc_widths_and_zero():
    v = Tensor(np.zeros((2, 3)))
    out = layers.positional_encoding(v, 10)
    assert out.value.shape == (2, 60)
    out4 = layers.positional_encoding(v, 4)
    assert out4.value.shape == (2, 24)
    # v=0: every sin column exactly 0, every cos column exactly 1
    val = out4.value.reshape(2, 8, 3)
    assert np.all(val[:, 0::2, :] == 0.0)
    assert np.all(val[:, 1::2, :] == 1.0)


def test_posenc_frequencies():
    v = Tensor(np.full((1, 1), 0.25))
    out = layers.positional_encoding(v, 2).value.ravel()
    want = [np.sin(np.pi * 0.25), np.cos(np.pi * 0.25), np.sin(2 * np.pi * 0.25), np.cos(2 * np.pi * 0.25)]
    assert out == pytest.approx(want, abs=1e-15)


# -- GRU -----------------------------------------------------------------------


def test_gru_zero_params_halves_state():
    store = ParamStore()
    rng = np.random.default_rng(0)
    cell = layers.GRUCell(store, "g", n_in=3, n_hidden=4, rng=rng)
    for name in store.names():
        store[name].value[...] = 0.0
    h = np.random.default_rng(1).normal(size=(5, 4))
    out = cell(Tensor(np.ones((5, 3))), Tensor(h))
    assert np.allclose(out.value, 0.5 * h, atol=1e-15)


def test_gru_state_stays_bounded():
    store = ParamStore()
    rng = np.random.default_rng(2)
    cell = layers.GRUCell(store, "g", n_in=3, n_hidden=4, rng=rng)
    h = Tensor(np.clip(rng.normal(size=(6, 4)), -1.0, 1.0))
    for _ in range(20):
        h = cell(Tensor(rng.normal(size=(6, 3))), h)
    assert np.all(np.abs(h.value) <= 1.0 + 1e-12)


def test_gru_width_mismatch():
    store = ParamStore()
    cell = layers.GRUCell(store, "g", 3, 4, np.random.default_rng(0))
    with pytest.raises(ContractViolation):
        cell(Tensor(np.zeros((2, 5))), Tensor(np.zeros((2, 4))))


# -- MLP -------------------------------------------------------------------------


def test_mlp_identity_and_constant():
    store = ParamStore()
    rng = np.random.default_rng(3)
    net = layers.MLP(store, "m", [3, 3], rng)
    net.layers[0].weight.value[...] = np.eye(3)
    net.layers[0].bias.value[...] = 0.0
    x = rng.normal(size=(4, 3))
    assert np.array_equal(net(Tensor(x)).value, x)

    net.layers[0].weight.value[...] = 0.0
    net.layers[0].bias.value[...] = np.array([1.0, -2.0, 0.5])
    out = net(Tensor(x)).value
    assert np.all(out == np.array([1.0, -2.0, 0.5]))


def test_mlp_skip_width_bookkeeping():
    store = ParamStore()
    net = layers.MLP(store, "m", [3, 8, 8, 2], np.random.default_rng(4), skips=(2,))
    assert store["m.l2.weight"].value.shape == (8 + 3, 2)
    out = net(Tensor(np.random.default_rng(5).normal(size=(6, 3))))
    assert out.value.shape == (6, 2)


def test_linear_width_mismatch():
    store = ParamStore()
    lin = layers.Linear(store, "l", 3, 2, np.random.default_rng(0))
    with pytest.raises(ContractViolation):
        lin(Tensor(np.zeros((2, 4))))


# -- continuous convolution -------------------------------------------------------


def _simple_instance(seed=0, n_in=2, n_out=2, radius=0.4):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    conv = layers.CConv(store, "c", n_in, n_out, radius, rng)
    qpos = rng.uniform(0.2, 0.8, size=(5, 3))
    spos = np.concatenate([qpos + rng.uniform(-0.15, 0.15, size=(5, 3)) for _ in range(3)])
    feats = rng.normal(size=(spos.shape[0], n_in))
    selff = rng.normal(size=(qpos.shape[0], n_in))
    nbrs = layers.neighbor_list(qpos, spos, radius)
    return store, conv, qpos, spos, feats, selff, nbrs


def test_cconv_no_neighbors_zero_self_is_zero():
    rng = np.random.default_rng(6)
    store = ParamStore()
    conv = layers.CConv(store, "c", 3, 2, 0.1, rng)
    qpos = np.zeros((2, 3))
    spos = np.full((4, 3), 5.0)  # far outside the ball
    nbrs = layers.neighbor_list(qpos, spos, 0.1)
    assert nbrs.indices.size == 0
    out = conv(qpos, spos, rng.normal(size=(4, 3)), nbrs, np.zeros((2, 3)))
    assert np.all(out.value == 0.0)


def test_cconv_averaging_identity():
    # 1x1x1 all-ones kernel, window off, normalize on, equal neighbor features:
    # the convolution returns that feature, plus the self term.
    rng = np.random.default_rng(7)
    store = ParamStore()
    conv = layers.CConv(store, "c", 1, 1, 0.5, rng, k=1, window="none")
    conv.kernel.value[...] = 1.0
    conv.self_weights.value[...] = 2.0
    qpos = np.array([[0.5, 0.5, 0.5]])
    spos = qpos + rng.uniform(-0.2, 0.2, size=(7, 3))
    feats = np.full((7, 1), 3.25)
    nbrs = layers.neighbor_list(qpos, spos, 0.5)
    assert nbrs.counts[0] == 7
    out = conv(qpos, spos, feats, nbrs, np.array([[1.5]]))
    assert out.value[0, 0] == pytest.approx(3.25 + 2.0 * 1.5, abs=1e-12)


def test_cconv_translation_invariance():
    store, conv, qpos, spos, feats, selff, nbrs = _simple_instance()
    out0 = conv(qpos, spos, feats, nbrs, selff).value
    shift = np.array([12.3, -4.5, 6.7])
    nbrs2 = layers.neighbor_list(qpos + shift, spos + shift, conv.radius)
    out1 = conv(qpos + shift, spos + shift, feats, nbrs2, selff).value
    assert np.max(np.abs(out0 - out1)) < 1e-10


def test_cconv_permutation_invariance_exact():
    store, conv, qpos, spos, feats, selff, nbrs = _simple_instance(seed=1)
    out0 = conv(qpos, spos, feats, nbrs, selff).value
    # shuffle each query's segment of the pair list; result must be bit-identical
    rng = np.random.default_rng(99)
    idx = nbrs.indices.copy()
    dist = nbrs.distances.copy()
    for q in range(nbrs.offsets.size - 1):
        lo, hi = nbrs.offsets[q], nbrs.offsets[q + 1]
        perm = rng.permutation(hi - lo)
        idx[lo:hi] = idx[lo:hi][perm]
        dist[lo:hi] = dist[lo:hi][perm]
    shuffled = NeighborList(nbrs.offsets.copy(), idx, dist)
    out1 = conv(qpos, spos, feats, shuffled, selff).value
    assert out0.tobytes() == out1.tobytes()


def test_cconv_feature_width_mismatch():
    store, conv, qpos, spos, feats, selff, nbrs = _simple_instance()
    with pytest.raises(ContractViolation):
        conv(qpos, spos, np.zeros((spos.shape[0], 5)), nbrs, selff)
    with pytest.raises(ContractViolation):
        conv(qpos, spos, feats, nbrs, np.zeros((2, 2)))


def test_cconv_without_self_term():
    rng = np.random.default_rng(8)
    store = ParamStore()
    conv = layers.CConv(store, "c", 2, 3, 0.4, rng, with_self=False)
    assert "c.self_weights" not in store
    qpos = rng.uniform(0.3, 0.7, size=(3, 3))
    spos = qpos.repeat(2, axis=0) + rng.uniform(-0.1, 0.1, size=(6, 3))
    nbrs = layers.neighbor_list(qpos, spos, 0.4)
    out = conv(qpos, spos, rng.normal(size=(6, 2)), nbrs)
    assert out.value.shape == (3, 3)
    assert np.all(np.isfinite(out.value))


def test_cconv_normalization_scales_sum():
    # normalize=False output equals normalize=True output times neighbor count
    store, conv, qpos, spos, feats, selff, nbrs = _simple_instance(seed=2)
    selff0 = np.zeros_like(selff)
    out_n = conv(qpos, spos, feats, nbrs, selff0).value
    conv.normalize = False
    out_raw = conv(qpos, spos, feats, nbrs, selff0).value
    counts = np.maximum(nbrs.counts.astype(float), 1.0)
    assert np.allclose(out_raw, out_n * counts[:, None], rtol=1e-12, atol=1e-14)


# -- gradient checks through the composite pieces ---------------------------------


@pytest.mark.parametrize("check", model_checks(), ids=lambda c: c.name)
def test_model_gradients(check):
    worst = 0.0
    for s in range(3):
        rng = np.random.default_rng(100 + s)
        f, arrays = check.make(rng)
        worst = max(worst, gradcheck(f, arrays, step=1e-5))
    assert worst < check.tol, f"{check.name}: max rel err {worst:.3e}"
