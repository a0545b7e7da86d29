import math
import struct

import numpy as np
import pytest

from ppg.nn import (
    F,
    AdaLN,
    Conv2d,
    FeedForward,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    ParameterStore,
    ShapeError,
    Tensor,
    directional_check,
    gradient_check,
    no_grad,
    primitive_forward,
    read_tensors,
    write_tensors,
)

TOL = 1e-4


def leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def test_identity_gradient_is_exact(rng):
    x = leaf(rng, 4, 5)
    assert gradient_check(lambda: F.identity(x), [x]) == 0.0


@pytest.mark.parametrize("op", ["add", "mul", "sub", "scale", "matmul", "pow"])
def test_elementwise_and_matmul(rng, op):
    a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
    fns = {
        "add": lambda: a + b,
        "mul": lambda: a * b,
        "sub": lambda: a - b,
        "scale": lambda: a / 4.0 + b * 0.5,
        "matmul": lambda: a @ b.transpose(1, 0),
        "pow": lambda: a * a * a,
    }
    gradient_check(fns[op], [a, b] if op != "pow" else [a], tolerance=TOL, name=op)


def test_broadcast_gradient_sums_over_expanded_axes(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 4)
    gradient_check(lambda: a * b + b, [a, b], tolerance=TOL)


def test_linear(rng):
    x, w, b = leaf(rng, 2, 5, 6), leaf(rng, 6, 3), leaf(rng, 3)
    gradient_check(lambda: primitive_forward("linear", x, w, b), [x, w, b], tolerance=TOL)


def test_layer_norm(rng):
    x, w, b = leaf(rng, 3, 7), leaf(rng, 7), leaf(rng, 7)
    gradient_check(lambda: primitive_forward("layer_norm", x, w, b), [x, w, b], tolerance=TOL)
    out = F.layer_norm(Tensor(rng.standard_normal((4, 16)))).data
    assert np.allclose(out.mean(axis=1), 0, atol=1e-12)
    assert np.allclose(out.var(axis=1), 1, atol=1e-4)


def test_softmax_with_mask(rng):
    x = leaf(rng, 2, 3, 5)
    mask = np.where(rng.random((2, 1, 5)) < 0.3, -1e9, 0.0)
    mask[..., 0] = 0.0
    gradient_check(lambda: primitive_forward("softmax", x, axis=-1, additive_mask=mask), [x], tolerance=TOL)
    p = F.softmax(x, additive_mask=mask).data
    assert np.allclose(p.sum(-1), 1)
    assert np.all(p[np.broadcast_to(mask < 0, p.shape)] < 1e-300)


def test_softmax_is_shift_invariant(rng):
    x = rng.standard_normal((3, 6))
    assert np.allclose(F.softmax(Tensor(x)).data, F.softmax(Tensor(x + 1000.0)).data)


def test_gelu_and_silu(rng):
    x = leaf(rng, 4, 6)
    gradient_check(lambda: primitive_forward("gelu", x), [x], tolerance=TOL)
    gradient_check(lambda: F.silu(x), [x], tolerance=TOL)
    v = np.array([-3.0, 0.0, 1.0])
    want = 0.5 * v * (1 + np.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v**3)))
    assert np.allclose(F.gelu(Tensor(v)).data, want)


def test_dropout(rng):
    x = leaf(rng, 50, 40)
    gradient_check(lambda: primitive_forward("dropout", x, 0.3, True, np.random.default_rng(5)), [x], tolerance=TOL)
    assert F.dropout(x, 0.5, False, None) is x
    y = F.dropout(Tensor(np.ones((200, 200))), 0.25, True, np.random.default_rng(0)).data
    assert abs(y.mean() - 1.0) < 0.02
    assert set(np.unique(y)) <= {0.0, 1 / 0.75}
    with pytest.raises(ValueError):
        F.dropout(x, 0.5, True, None)


def test_embedding_lookup(rng):
    w = leaf(rng, 10, 4)
    ids = np.array([[1, 3, 3], [0, 9, 1]])
    gradient_check(lambda: primitive_forward("embedding_lookup", w, ids), [w], tolerance=TOL)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv2d(rng, stride, pad):
    x, w, b = leaf(rng, 2, 3, 7, 6), leaf(rng, 4, 3, 3, 3), leaf(rng, 4)
    gradient_check(lambda: primitive_forward("conv2d", x, w, b, stride=stride, pad=pad), [x, w, b], tolerance=TOL)


def test_conv2d_matches_naive_loop(rng):
    x, w = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
    got = F.conv2d(Tensor(x), Tensor(w), None, stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    want = np.zeros((1, 3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                want[0, o, i, j] = np.sum(xp[0, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o])
    assert np.allclose(got, want)


def test_cross_entropy_hard_soft_weighted(rng):
    z = leaf(rng, 4, 6, 5)
    ids = rng.integers(0, 5, (4, 6))
    w = rng.random((4, 6)) + 0.1
    gradient_check(lambda: F.cross_entropy(z, ids, w), [z], tolerance=TOL)
    soft = rng.dirichlet(np.ones(5), size=(4, 6))
    gradient_check(lambda: F.cross_entropy(z, soft), [z], tolerance=TOL)
    logp = z.data - np.log(np.exp(z.data).sum(-1, keepdims=True))
    want = -(np.take_along_axis(logp, ids[..., None], -1)[..., 0] * w).sum() / w.sum()
    assert float(F.cross_entropy(z, ids, w).data) == pytest.approx(want)
    with pytest.raises(ShapeError):
        F.cross_entropy(z, np.full((4, 6), 5))


def test_reshape_transpose_getitem_concat(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 2, 1, 4)
    gradient_check(lambda: F.concat([a, b], axis=1).reshape(2, 16).transpose(1, 0)[3:9], [a, b], tolerance=TOL)
    gradient_check(lambda: a[:, [0, 0, 2], 1:], [a], tolerance=TOL)
    gradient_check(lambda: F.tmean(a, axis=1) + F.tsum(a, axis=(0, 2), keepdims=True).reshape(3)[0], [a], tolerance=TOL)


def test_modules_gradcheck(rng):
    x = leaf(rng, 2, 5, 8)
    ctx = leaf(rng, 2, 3, 8)
    mask = np.array([[True, True, False], [True, False, False]])
    mha = MultiHeadAttention(8, 2, rng, dtype=np.float64)
    gradient_check(lambda: mha(x, ctx, mask), [x, ctx] + list(mha.parameters_dict().values()), tolerance=TOL)
    ada = AdaLN(8, rng, dtype=np.float64)
    ada.modulation.weight.data[:] = rng.standard_normal(ada.modulation.weight.shape) * 0.3
    t = np.array([3, 11])
    gradient_check(lambda: ada(x, t), [x] + list(ada.parameters_dict().values()), tolerance=TOL)
    ff = FeedForward(8, 16, rng, dtype=np.float64)
    gradient_check(lambda: ff(x), [x] + list(ff.parameters_dict().values()), tolerance=TOL)
    ln = LayerNorm(8, dtype=np.float64)
    gradient_check(lambda: ln(x), [x, ln.weight, ln.bias], tolerance=TOL)
    conv = Conv2d(2, 3, 3, rng, stride=2, pad=1, dtype=np.float64)
    img = leaf(rng, 1, 2, 6, 6)
    gradient_check(lambda: conv(img), [img, conv.weight, conv.bias], tolerance=TOL)


def test_attention_ignores_masked_keys(rng):
    mha = MultiHeadAttention(8, 2, rng, dtype=np.float64)
    x = Tensor(rng.standard_normal((1, 3, 8)))
    kv = rng.standard_normal((1, 4, 8))
    mask = np.array([[True, True, False, False]])
    out1 = mha(x, Tensor(kv), mask).data
    kv[0, 2:] = 100.0
    out2 = mha(x, Tensor(kv), mask).data
    assert np.allclose(out1, out2)


def test_adaln_starts_as_plain_layer_norm(rng):
    ada = AdaLN(8, rng, dtype=np.float64)
    x = Tensor(rng.standard_normal((2, 3, 8)))
    assert np.allclose(ada(x, np.array([1, 7])).data, F.layer_norm(x).data)


def test_shape_errors(rng):
    with pytest.raises(ShapeError):
        LayerNorm(4)(Tensor(np.zeros((2, 5))))
    with pytest.raises(ShapeError):
        MultiHeadAttention(6, 4, rng)
    with pytest.raises(ValueError):
        primitive_forward("nope")


def test_gradient_check_rejects_float32():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    with pytest.raises(AssertionError):
        gradient_check(lambda: x * x, [x])


def test_directional_check_catches_a_wrong_gradient(rng):
    x = leaf(rng, 5)
    bad = lambda: Tensor._make(x.data**2, (x,), lambda g: (g * x.data,))  # true gradient is 2x
    assert directional_check(bad, [x], directions=3) > 0.1
    assert directional_check(lambda: x * x, [x], directions=3) < 1e-8


def test_no_grad_disables_graph(rng):
    x = leaf(rng, 3)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad
    assert (x * 2.0).requires_grad


def test_backward_accumulates_shared_nodes(rng):
    x = leaf(rng, 3)
    y = x * x + x
    y.backward(np.ones(3))
    assert np.allclose(x.grad, 2 * x.data + 1)


def test_adamw_step_matches_hand_computation():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    store = ParameterStore({"p": p}, lr=0.1, weight_decay=0.01)
    g = np.array([0.5, -0.25])
    p.grad = g.copy()
    store.step()
    m = 0.1 * g
    v = 0.001 * g * g
    mh, vh = m / 0.1, v / 0.001
    want = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * mh / (np.sqrt(vh) + 1e-8)
    assert np.allclose(p.data, want, atol=1e-12)


def test_zero_gradient_leaves_parameters_without_decay():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    store = ParameterStore({"p": p}, weight_decay=0.0)
    for _ in range(3):
        p.grad = np.zeros(2)
        store.step()
    assert np.array_equal(p.data, [1.0, 2.0])


def test_non_finite_gradient_is_rejected():
    p = Tensor(np.ones(2), requires_grad=True)
    store = ParameterStore({"p": p})
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(FloatingPointError):
        store.step()


def test_prck_round_trip_and_layout(tmp_path):
    tensors = {
        "a": np.arange(6, dtype=np.float32).reshape(2, 3),
        "b/c": np.array([1.5, -2.0]),
        "ids": np.array([[1, 2]], dtype=np.int64),
        "bytes": np.frombuffer(b"xyz", dtype=np.uint8),
        "scalar": np.array(3.0),
    }
    path = tmp_path / "t.prck"
    write_tensors(path, tensors)
    back = read_tensors(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype and np.array_equal(back[k], tensors[k])
    raw = path.read_bytes()
    assert raw[:4] == b"PRCK" and struct.unpack_from("<I", raw, 4)[0] == 1
    # first record: name length, name, dtype code, rank, dims, payload
    assert struct.unpack_from("<I", raw, 8)[0] == 1 and raw[12:13] == b"a"
    code, rank = struct.unpack_from("<BI", raw, 13)
    assert (code, rank) == (0, 2) and struct.unpack_from("<2I", raw, 18) == (2, 3)
    assert np.array_equal(np.frombuffer(raw, "<f4", 6, 26), np.arange(6))


def test_prck_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.prck"
    p.write_bytes(b"NOPE\x01\x00\x00\x00")
    with pytest.raises(ValueError, match="PRCK"):
        read_tensors(p)


def test_optimizer_state_survives_save_and_load(tmp_path, rng):
    lin = Linear(3, 2, rng)
    store = ParameterStore(lin.parameters_dict())
    for _ in range(2):
        for p in lin.parameters_dict().values():
            p.grad = np.ones_like(p.data)
        store.step()
    store.save(tmp_path / "s.prck")
    lin2 = Linear(3, 2, np.random.default_rng(99))
    store2 = ParameterStore(lin2.parameters_dict())
    store2.load(tmp_path / "s.prck")
    assert store2.step_count == 2
    for k in store.params:
        assert np.array_equal(store.params[k].data, store2.params[k].data)
        assert np.array_equal(store.m[k], store2.m[k]) and np.array_equal(store.v[k], store2.v[k])
