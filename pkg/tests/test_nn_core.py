import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lyapsafe import nn
from lyapsafe.errors import DimensionError, NumericError, ParameterError
from lyapsafe.nn import functional as F


def naive_matvec(W, x, b):
    out = [0.0] * len(W)
    for i in range(len(W)):
        acc = 0.0
        for j in range(len(x)):
            acc += W[i][j] * x[j]
        out[i] = acc + b[i]
    return out


def naive_conv(img, filt):
    c, h, w = img.shape
    f, _, k, _ = filt.shape
    out = np.zeros((f, h - k + 1, w - k + 1))
    for o in range(f):
        for i in range(h - k + 1):
            for j in range(w - k + 1):
                acc = 0.0
                for ch in range(c):
                    for di in range(k):
                        for dj in range(k):
                            acc += img[ch, i + di, j + dj] * filt[o, ch, di, dj]
                out[o, i, j] = acc
    return out


# -- dense ------------------------------------------------------------------------
def test_dense_identity_and_arithmetic():
    assert np.array_equal(nn.dense_forward([1.0, 2.0], np.eye(2), [0.0, 0.0]).data, [1.0, 2.0])
    assert np.array_equal(nn.dense_forward([1.0, 1.0], [[2.0, 3.0]], [1.0]).data, [6.0])


def test_dense_matches_triple_loop():
    rng = np.random.default_rng(1)
    W, x, b = rng.normal(size=(8, 5)), rng.normal(size=5), rng.normal(size=8)
    got = nn.dense_forward(x, W, b).data
    assert np.max(np.abs(got - naive_matvec(W.tolist(), x.tolist(), b.tolist()))) < 1e-12


def test_dense_shape_mismatch():
    with pytest.raises(DimensionError):
        nn.dense_forward(np.ones(3), np.ones((2, 2)), np.zeros(2))


# -- softmax ----------------------------------------------------------------------
def test_softmax_examples():
    assert np.allclose(nn.softmax([0.0, 0.0, 0.0]).data, [1 / 3] * 3, atol=1e-15)
    got = nn.softmax(np.log([1.0, 2.0, 3.0])).data
    assert np.allclose(got, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)
    with pytest.raises(DimensionError):
        nn.softmax(np.zeros(0))


@given(
    st.lists(st.floats(-50, 50), min_size=1, max_size=12),
    st.floats(-100, 100),
)
@settings(max_examples=200, deadline=None)
def test_softmax_sum_and_shift_invariance(v, c):
    v = np.array(v)
    p = nn.softmax(v).data
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p > 0)
    assert np.allclose(nn.softmax(v + c).data, p, atol=1e-12)


# -- layer norm -----------------------------------------------------------------------
def test_layer_norm_examples():
    ones, zeros = np.ones(4), np.zeros(4)
    assert np.array_equal(nn.layer_norm(np.full(4, 3.7), ones, zeros).data, zeros)
    out = nn.layer_norm([1.0, -1.0], np.ones(2), np.zeros(2), eps=1e-300).data
    assert np.allclose(out, [1.0, -1.0], atol=1e-15)


def test_layer_norm_moments():
    rng = np.random.default_rng(3)
    for _ in range(20):
        v = rng.normal(3.0, 5.0, size=17)
        out = nn.layer_norm(v, np.ones(17), np.zeros(17), eps=1e-5).data
        assert abs(out.mean()) < 1e-6
        # eps shifts the variance by eps / (var + eps); var is ~25 here
        assert abs(out.var() - 1.0) < 1e-6


# -- dropout --------------------------------------------------------------------------
def test_dropout_identities():
    v = np.arange(1.0, 6.0)
    rng = nn.RngStream(0, "dropout")
    for mode in ("train", "eval", "mc"):
        assert np.array_equal(nn.dropout(v, 0.0, mode, rng).data, v)
    assert np.array_equal(nn.dropout(v, 0.5, "eval", rng).data, v)
    with pytest.raises(ParameterError):
        nn.dropout(v, 1.0, "train", rng)


def test_dropout_monte_carlo_expectation():
    v = np.array([1.0, -2.0, 0.5, 3.0])
    p, n = 0.5, 100_000
    rng = nn.RngStream(7, "dropout")
    samples = nn.dropout(np.tile(v, (n, 1)), p, "train", rng).data
    mean = samples.mean(axis=0)
    sigma = np.abs(v) * math.sqrt(p / (1 - p)) / math.sqrt(n)
    assert np.all(np.abs(mean - v) <= 3 * sigma)


def test_dropout_mask_probability():
    rng = nn.RngStream(11, "dropout")
    out = nn.dropout(np.ones(100_000), 0.3, "mc", rng).data
    frac = np.mean(out == 0.0)
    assert abs(frac - 0.3) < 3 * math.sqrt(0.3 * 0.7 / 100_000)
    assert np.allclose(out[out != 0], 1 / 0.7)


# -- conv / pool ---------------------------------------------------------------------
def test_conv_examples():
    img = np.random.default_rng(0).normal(size=(2, 4, 4))
    ones = np.ones((1, 2, 1, 1))
    assert np.allclose(nn.conv2d_forward(img, ones).data[0], img.sum(axis=0))
    assert np.array_equal(nn.conv2d_forward(np.zeros((3, 5, 5)), np.ones((2, 3, 3, 3))).data, np.zeros((2, 3, 3)))
    with pytest.raises(DimensionError):
        nn.conv2d_forward(np.zeros((1, 2, 2)), np.ones((1, 1, 3, 3)))


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(5)
    img, filt = rng.normal(size=(3, 8, 8)), rng.normal(size=(4, 3, 3, 3))
    assert np.max(np.abs(nn.conv2d_forward(img, filt).data - naive_conv(img, filt))) < 1e-12
    padded = np.pad(img, ((0, 0), (1, 1), (1, 1)))
    same = nn.conv2d_forward(img, filt, padding=1).data
    assert same.shape == (4, 8, 8)
    assert np.max(np.abs(same - naive_conv(padded, filt))) < 1e-12


def test_max_pool():
    x = np.arange(16.0).reshape(1, 4, 4)
    assert np.array_equal(nn.max_pool2d(x).data, [[[5.0, 7.0], [13.0, 15.0]]])


# -- adam -------------------------------------------------------------------------------
def test_adam_zero_gradient_is_identity():
    store = nn.ParamStore()
    w = store.add("w", [1.0, -2.0])
    w.grad = np.zeros(2)
    nn.adam_step(store, nn.AdamState(lr=0.1))
    assert np.array_equal(store["w"].data, [1.0, -2.0])


@pytest.mark.parametrize("g", [3.0, -0.25])
def test_adam_first_step(g):
    store = nn.ParamStore()
    store.add("w", 0.5)
    store["w"].grad = np.array(g)
    state = nn.AdamState(lr=0.01)
    nn.adam_step(store, state)
    # bias-corrected first step is -lr * g / (|g| + eps)
    assert abs((store["w"].data - 0.5) + 0.01 * np.sign(g)) < 0.01 * 1e-8 / abs(g) + 1e-15
    assert store["w"].grad is None


def test_adam_minimises_square():
    store = nn.ParamStore()
    store.add("w", 1.0)
    state = nn.AdamState(lr=0.01)
    for step in range(2000):
        w = store["w"]
        (w * w).backward()
        nn.adam_step(store, state)
        if abs(store["w"].data) < 1e-3:
            break
    assert abs(store["w"].data) < 1e-3


def test_adam_non_finite_gradient_names_parameter():
    store = nn.ParamStore()
    store.add("encoder.W", [1.0])
    store["encoder.W"].grad = np.array([np.nan])
    with pytest.raises(NumericError, match="encoder.W"):
        nn.adam_step(store, nn.AdamState())


def test_adam_lr_overrides():
    st_ = nn.AdamState(lr=1e-4, lr_overrides={"q.": 1e-3, "q.head": 1e-2})
    assert st_.lr_for("q.0.W") == 1e-3
    assert st_.lr_for("q.head.W") == 1e-2
    assert st_.lr_for("enc.W") == 1e-4


# -- gradient checks -------------------------------------------------------------------------
def _params(rng, **shapes):
    store = nn.ParamStore()
    for k, s in shapes.items():
        store.add(k, rng.normal(size=s))
    return store


def test_grad_check_linear_exact():
    rng = np.random.default_rng(0)
    store = _params(rng, w=(4,))
    x = rng.normal(size=4)
    assert nn.grad_check(lambda: (store["w"] * x).sum(), store) <= 1e-10


@pytest.mark.parametrize("point", range(3))
def test_grad_softmax_cross_entropy(point):
    rng = np.random.default_rng(100 + point)
    store = _params(rng, W=(5, 4), b=(5,))
    x = rng.normal(size=(3, 4))
    y = np.eye(5)[[0, 2, 4]]

    def f():
        logits = nn.dense_forward(x, store["W"], store["b"])
        return -(nn.log_softmax(logits) * y).sum() * (1 / 3)

    assert nn.grad_check(f, store) <= 1e-6


@pytest.mark.parametrize("point", range(3))
def test_grad_layers(point):
    rng = np.random.default_rng(200 + point)
    store = _params(rng, W=(3, 6), b=(3,), g=(6,), s=(6,), f=(2, 3, 3, 3), fb=(2,), v=(4, 6))
    img = rng.normal(size=(2, 3, 6, 6))

    def f_dense_ln():
        h = nn.layer_norm(store["v"], store["g"], store["s"])
        h = nn.tanh(nn.dense_forward(h, store["W"], store["b"]))
        return (nn.sigmoid(h) * np.arange(3.0)).sum() + nn.softmax(h).sum(axis=0)[0]

    def f_conv():
        out = nn.conv2d_forward(img, store["f"], store["fb"])
        return (nn.max_pool2d(nn.relu(out)) * 0.5).sum()

    assert nn.grad_check(f_dense_ln, store) <= 1e-6
    assert nn.grad_check(f_conv, {k: store[k] for k in ("f", "fb")}) <= 1e-6
    x = nn.Tensor(img[0], requires_grad=True)

    def f_conv_same():
        t = nn.tanh(nn.conv2d_forward(x, store["f"], store["fb"], padding=1))
        return (t * t).sum()

    assert nn.grad_check(f_conv_same, {"x": x, "f": store["f"]}) <= 1e-6


@pytest.mark.parametrize("point", range(3))
def test_grad_loss_heads(point):
    rng = np.random.default_rng(300 + point)
    store = _params(rng, z=(6,), l=(4, 3))
    labels = (rng.random(6) > 0.5).astype(float)
    target = nn.softmax(rng.normal(size=(4, 3))).data
    assert nn.grad_check(lambda: nn.bce_with_logits(store["z"], labels), {"z": store["z"]}) <= 1e-6
    assert nn.grad_check(lambda: nn.js_divergence_loss(nn.softmax(store["l"]), target), {"l": store["l"]}) <= 1e-6


def test_masked_softmax_grad_and_reduction():
    rng = np.random.default_rng(9)
    store = _params(rng, s=(3, 5), m=(5,))
    store["m"].data = rng.uniform(0.2, 1.0, size=5)
    w = rng.normal(size=(3, 5))
    assert nn.grad_check(lambda: (nn.masked_softmax(store["s"], store["m"]) * w).sum(), store) <= 1e-6
    s = rng.normal(size=(4, 7))
    assert np.array_equal(nn.masked_softmax(s, np.ones(7)).data, nn.softmax(s).data)


# -- checkpoint / rng ----------------------------------------------------------------------
def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(4)
    arrays = {"a": rng.normal(size=(3, 4)), "b.c": np.array(np.pi), "z": rng.normal(size=7) * 1e300}
    nn.save_arrays(tmp_path / "ck", arrays, meta={"k": 1})
    back, meta = nn.load_arrays(tmp_path / "ck")
    assert meta == {"k": 1}
    for k, v in arrays.items():
        assert back[k].shape == v.shape
        assert back[k].tobytes() == np.asarray(v, dtype="<f8").tobytes()


def test_rng_streams_deterministic_and_distinct():
    a1 = nn.RngStream(42, "dropout").random(5)
    a2 = nn.RngStream(42, "dropout").random(5)
    b = nn.RngStream(42, "bootstrap").random(5)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, b)
    assert not np.array_equal(a1, nn.RngStream(43, "dropout").random(5))


def test_forward_is_pure():
    rng = np.random.default_rng(0)
    store = _params(rng, W=(3, 4), b=(3,))
    x = rng.normal(size=4)
    out1 = nn.dense_forward(x, store["W"], store["b"]).data
    out2 = nn.dense_forward(x, store["W"], store["b"]).data
    assert np.array_equal(out1, out2)
