import math

import numpy as np
import pytest

from cdt import blob
from cdt.tensor import (
    ConfigError,
    ContractError,
    ShapeError,
    Tape,
    Tensor,
    add,
    backward,
    concat,
    dropout,
    finite_difference_gradient,
    gelu,
    layer_norm,
    matmul,
    mse,
    mul,
    multi_head_attention,
    reshape,
    scale,
    softmax,
    sub,
    tensor_sum,
    transpose,
)


def t(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def rel_err(a, b):
    # the floor keeps exactly-zero gradients (e.g. attention key bias) from
    # turning rounding noise into a relative error of 1
    a, b = np.ravel(a), np.ravel(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-6)


def grad_of(f, *xs):
    with Tape() as tape:
        loss = f(*xs)
        backward(loss, tape)
    return [x.grad for x in xs]


def fd_check(f, xs, h=1e-5, wrt=None):
    analytic = grad_of(f, *xs)
    for i, (x, g) in enumerate(zip(xs, analytic)):
        if wrt is not None and i not in wrt:
            continue
        num = finite_difference_gradient(lambda _: float(f(*xs).data), x, h)
        assert rel_err(g, num) < 1e-4


# ---- matmul -----------------------------------------------------------------

def test_matmul_identity_and_small():
    b = t([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(matmul(t(np.eye(2)), b).data, b.data)
    np.testing.assert_array_equal(matmul(t([[1.0, 2.0]]), t([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
    ref = np.zeros((3, 5))
    for i in range(3):
        for j in range(5):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.abs(matmul(t(a), t(b)).data - ref).max() < 1e-6


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))


# ---- softmax ----------------------------------------------------------------

def test_softmax_cases():
    np.testing.assert_allclose(softmax(t(np.zeros(4))).data, 0.25)
    s = softmax(t([1000.0, 0.0])).data
    assert abs(s[0] - 1.0) < 1e-12 and abs(s[1]) < 1e-12
    x = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(softmax(t(x)).data, np.exp(x) / np.exp(x).sum(), rtol=1e-15)


# ---- layer norm -------------------------------------------------------------

def test_layer_norm_cases():
    ones, zeros = t(np.ones(4)), t(np.zeros(4))
    np.testing.assert_array_equal(layer_norm(t(np.full(4, 3.0)), ones, zeros).data, 0.0)
    np.testing.assert_allclose(layer_norm(t([1.0, -1.0]), t(np.ones(2)), t(np.zeros(2)), eps=1e-12).data,
                               [1.0, -1.0], atol=1e-9)
    x = np.random.default_rng(1).normal(5.0, 3.0, 64)
    y = layer_norm(t(x), t(np.ones(64)), t(np.zeros(64))).data
    assert abs(y.mean()) < 1e-6 and abs(y.var() - 1.0) < 1e-4


# ---- gelu -------------------------------------------------------------------

def test_gelu_cases():
    assert gelu(t([0.0])).data[0] == 0.0
    big = gelu(t([20.0, -20.0])).data
    assert abs(big[0] - 20.0) < 1e-9 and abs(big[1]) < 1e-9
    # tanh approximation at x = 1
    assert abs(gelu(t([1.0])).data[0] - 0.8411919906082768) < 1e-15


# ---- attention --------------------------------------------------------------

def _attn_params(d, rng, zero=False):
    p = {}
    for n in ("q", "k", "v", "o"):
        p[f"w{n}"] = t(np.zeros((d, d)) if zero else rng.standard_normal((d, d)) / math.sqrt(d))
        p[f"b{n}"] = t(np.zeros(d) if zero else rng.standard_normal(d) * 0.1)
    return p


def test_attention_rows_and_single_key():
    rng = np.random.default_rng(2)
    p = _attn_params(8, rng)
    q, kv = t(rng.standard_normal((5, 8))), t(rng.standard_normal((7, 8)))
    _, w = multi_head_attention(q, kv, kv, p, heads=2)
    assert w.shape == (2, 5, 7)
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-12)
    one = t(rng.standard_normal((1, 8)))
    out, w1 = multi_head_attention(q, one, one, p, heads=2)
    np.testing.assert_array_equal(w1.data, 1.0)
    v = one.data @ p["wv"].data + p["bv"].data
    np.testing.assert_allclose(out.data, np.repeat(v @ p["wo"].data + p["bo"].data, 5, axis=0), atol=1e-12)


def test_attention_single_head_reference():
    rng = np.random.default_rng(3)
    d = 4
    p = _attn_params(d, rng)
    q, kv = rng.standard_normal((3, d)), rng.standard_normal((5, d))
    out, _ = multi_head_attention(t(q), t(kv), t(kv), p, heads=1)
    P = {k: v.data for k, v in p.items()}
    Q, K, V = q @ P["wq"] + P["bq"], kv @ P["wk"] + P["bk"], kv @ P["wv"] + P["bv"]
    s = Q @ K.T / math.sqrt(d)
    a = np.exp(s - s.max(1, keepdims=True))
    a /= a.sum(1, keepdims=True)
    assert np.abs(out.data - ((a @ V) @ P["wo"] + P["bo"])).max() < 1e-5


def test_attention_head_divisibility():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        multi_head_attention(t(np.ones((2, 6))), t(np.ones((2, 6))), t(np.ones((2, 6))),
                             _attn_params(6, rng), heads=4)


# ---- backward ---------------------------------------------------------------

def test_backward_analytic():
    x = t([1.0, 2.0, 3.0])
    (g,) = grad_of(lambda x: tensor_sum(x), x)
    np.testing.assert_array_equal(g, 1.0)
    x = t([1.0, 2.0])
    (g,) = grad_of(lambda x: tensor_sum(mul(x, x)), x)
    np.testing.assert_array_equal(g, [2.0, 4.0])


def test_backward_needs_scalar():
    x = t([1.0, 2.0])
    with Tape() as tape:
        y = mul(x, x)
        with pytest.raises(ContractError):
            backward(y, tape)


def test_finite_difference_basics():
    x = t(np.random.default_rng(0).standard_normal(5))
    g = finite_difference_gradient(lambda x: float(x.data.sum()), x)
    np.testing.assert_allclose(g, 1.0, atol=1e-9)
    x3 = t([3.0])
    assert abs(finite_difference_gradient(lambda x: float(x.data[0] ** 2), x3)[0] - 6.0) < 1e-6


def test_finite_difference_agrees_with_backward_on_mlp():
    rng = np.random.default_rng(4)
    x, w1, b1, w2 = (t(rng.standard_normal(s)) for s in ((6, 3), (3, 5), (5,), (5, 2)))

    def f(x, w1, b1, w2):
        return tensor_sum(mul(matmul(gelu(add(matmul(x, w1), b1)), w2), matmul(gelu(add(matmul(x, w1), b1)), w2)))

    fd_check(f, [x, w1, b1, w2])


# every op, 10 seeds, float64 central differences
OPS = {
    "add": (lambda a, b: tensor_sum(mul(add(a, b), add(a, b))), [(3, 4), (4,)]),
    "sub": (lambda a, b: tensor_sum(mul(sub(a, b), a)), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: tensor_sum(mul(mul(a, b), a)), [(2, 3), (2, 3)]),
    "scale": (lambda a: tensor_sum(mul(scale(a, -1.7), a)), [(3,)]),
    "matmul": (lambda a, b: tensor_sum(mul(matmul(a, b), matmul(a, b))), [(2, 3, 4), (4, 5)]),
    "transpose": (lambda a, b: tensor_sum(mul(transpose(a, (1, 0, 2)), b)), [(2, 3, 4), (3, 2, 4)]),
    "reshape": (lambda a, b: tensor_sum(mul(reshape(a, (6, 2)), b)), [(3, 4), (6, 2)]),
    "concat": (lambda a, b: tensor_sum(mul(concat([a, b], -1), concat([b, a], -1))), [(2, 3), (2, 3)]),
    "softmax": (lambda a, b: tensor_sum(mul(softmax(a), b)), [(3, 5), (3, 5)]),
    "layer_norm": (lambda a, g, b, c: tensor_sum(mul(layer_norm(a, g, b), c)), [(3, 6), (6,), (6,), (3, 6)]),
    "gelu": (lambda a: tensor_sum(mul(gelu(a), a)), [(4, 3)]),
    "mse": (lambda a, b: mse(a, b), [(3, 4), (3, 4)]),
}
GRAD_ARGS = {"mse": {0}}     # args to check; mse treats the target as data


@pytest.mark.parametrize("op", sorted(OPS))
@pytest.mark.parametrize("seed", range(10))
def test_op_gradients(op, seed):
    f, shapes = OPS[op]
    rng = np.random.default_rng(seed)
    fd_check(f, [t(rng.standard_normal(s)) for s in shapes], wrt=GRAD_ARGS.get(op))


@pytest.mark.parametrize("seed", range(10))
def test_dropout_gradient_with_fixed_mask(seed):
    x = t(np.random.default_rng(seed).standard_normal((4, 5)))

    def f(x):
        return tensor_sum(mul(dropout(x, 0.3, np.random.default_rng(99), True), x))

    fd_check(f, [x])


@pytest.mark.parametrize("seed", range(10))
def test_attention_gradients(seed):
    rng = np.random.default_rng(seed)
    p = _attn_params(4, rng)
    q, kv = t(rng.standard_normal((3, 4))), t(rng.standard_normal((5, 4)))
    names = list(p)

    def f(q, kv, *ws):
        out, _ = multi_head_attention(q, kv, kv, dict(zip(names, ws)), heads=2)
        return tensor_sum(mul(out, out))

    fd_check(f, [q, kv] + [p[n] for n in names])


def test_dropout_modes():
    x = t(np.ones((100, 100)), grad=False)
    assert dropout(x, 0.5, None, training=False) is x
    with pytest.raises(ContractError):
        dropout(x, 0.5, None, training=True)
    y = dropout(x, 0.5, np.random.default_rng(0), True).data
    # byte-resolution keep probability 128/256; kept units scaled by 2
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05
    y2 = dropout(x, 0.5, np.random.default_rng(0), True).data
    np.testing.assert_array_equal(y, y2)


# ---- blob format ------------------------------------------------------------

@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("shape", [(), (3,), (2, 3), (2, 0, 4), (1, 2, 3, 4)])
def test_blob_round_trip(dtype, shape):
    a = np.random.default_rng(0).standard_normal(shape).astype(dtype)
    b = blob.decode(blob.encode(a))
    assert b.dtype == a.dtype and b.shape == a.shape
    assert b.tobytes() == a.tobytes()


def test_blob_header_layout():
    raw = blob.encode(np.zeros((2, 3), dtype=np.float32))
    assert raw[:4] == b"CDTT" and raw[4] == 1 and raw[5] == 1 and raw[6] == 2 and raw[7] == 0
    assert int.from_bytes(raw[8:16], "little") == 2 and int.from_bytes(raw[16:24], "little") == 3
    assert len(raw) == 24 + 6 * 4


def test_blob_rejects_garbage():
    with pytest.raises(blob.BlobFormatError):
        blob.decode(b"NOPE" + bytes(20))
    good = blob.encode(np.zeros(3))
    with pytest.raises(blob.BlobFormatError):
        blob.decode(good[:-1])
