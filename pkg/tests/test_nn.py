from __future__ import annotations

import numpy as np
import pytest

from microbuild.nn import (
    AdamState,
    Conv2d,
    Dense,
    Flatten,
    LSTM,
    ReLU,
    Sequential,
    Softmax,
    Tanh,
    adam_step,
    flatten_arrays,
    grad_check,
    grad_check_fn,
    load_model,
    save_model,
    softmax,
    unflatten_into,
)

GC_TOL = 1e-4
EPS = 1e-4


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------- forward


def test_dense_identity():
    d = Dense(2, 2, dtype=np.float64)
    d.weight[:] = np.eye(2)
    out = d.forward(np.array([[3.0, 4.0]]))
    np.testing.assert_array_equal(out, [[3.0, 4.0]])


def test_dense_shape_mismatch_raises():
    d = Dense(3, 2, rng(0))
    with pytest.raises(ValueError):
        d.forward(np.zeros((1, 4), dtype=np.float32))


def test_softmax_simplex():
    r = rng(1)
    for _ in range(20):
        logits = r.standard_normal((4, 9)) * r.uniform(0.1, 30)
        p = softmax(logits)
        assert (p >= 0).all()
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


def test_conv_same_padding_preserves_hw():
    c = Conv2d(3, 5, k=3, stride=1, pad=1, rng=rng(2))
    out = c.forward(rng(3).standard_normal((2, 3, 7, 7)).astype(np.float32))
    assert out.shape == (2, 5, 7, 7)


def test_conv_strided_shape():
    c = Conv2d(14, 8, k=5, stride=2, rng=rng(2))
    out = c.forward(rng(3).standard_normal((1, 14, 16, 16)).astype(np.float32))
    assert out.shape == (1, 8, 6, 6)


def test_forward_determinism_bitwise():
    net = Sequential([Conv2d(2, 3, k=3, stride=1, rng=rng(5)), ReLU(), Flatten(), Dense(27, 4, rng(6))])
    x = rng(7).standard_normal((2, 2, 5, 5)).astype(np.float32)
    a = net.forward(x)
    b = net.forward(x)
    assert a.tobytes() == b.tobytes()


def test_lstm_zero_weights_zero_output():
    cell = LSTM(3, 4, dtype=np.float64)
    cell.bias[:] = 0.0
    h, c = cell.zero_state(1, dtype=np.float64)
    h2, c2 = cell.step(np.ones((1, 3)), h, c, cache=False)
    np.testing.assert_array_equal(h2, np.zeros((1, 4)))
    np.testing.assert_array_equal(c2, np.zeros((1, 4)))


def test_lstm_hidden_bounded():
    cell = LSTM(6, 5, rng(4), dtype=np.float64)
    h, c = cell.zero_state(3, dtype=np.float64)
    r = rng(8)
    for _ in range(50):
        h, c = cell.step(r.standard_normal((3, 6)) * 5, h, c, cache=False)
        assert np.abs(h).max() <= 1.0


# --------------------------------------------------------------- backward


def test_identity_chain_passes_grad_through():
    net = Sequential([Flatten()])
    x = rng(0).standard_normal((2, 3, 4)).astype(np.float64)
    net.zero_grads()
    net.forward(x)
    g = rng(1).standard_normal((2, 12))
    gx = net.backward(g)
    np.testing.assert_array_equal(gx, g.reshape(2, 3, 4))


def test_zero_output_grad_gives_zero_param_grads():
    net = Sequential([Dense(4, 3, rng(0), dtype=np.float64), Tanh()])
    net.zero_grads()
    net.forward(rng(1).standard_normal((2, 4)))
    net.backward(np.zeros((2, 3)))
    for g in net.grad_arrays():
        np.testing.assert_array_equal(g, np.zeros_like(g))


@pytest.mark.parametrize(
    "make_net,in_shape",
    [
        (lambda r: Sequential([Dense(5, 4, r, dtype=np.float64), Tanh()]), (3, 5)),
        (lambda r: Sequential([Dense(5, 4, r, dtype=np.float64), ReLU(), Dense(4, 2, r, dtype=np.float64)]), (3, 5)),
        (lambda r: Sequential([Dense(6, 4, r, dtype=np.float64), Softmax()]), (2, 6)),
        (
            lambda r: Sequential(
                [Conv2d(2, 3, k=3, stride=1, pad=1, rng=r, dtype=np.float64), ReLU(), Flatten()]
            ),
            (2, 2, 5, 5),
        ),
        (
            lambda r: Sequential(
                [
                    Conv2d(2, 3, k=3, stride=2, rng=r, dtype=np.float64),
                    Tanh(),
                    Flatten(),
                    Dense(27, 3, r, dtype=np.float64),
                ]
            ),
            (2, 2, 7, 7),
        ),
        (lambda r: LSTM(4, 3, r, dtype=np.float64), (2, 4)),
    ],
    ids=["dense-tanh", "dense-relu-dense", "dense-softmax", "conv-relu", "conv-tanh-dense", "lstm-step"],
)
def test_grad_check_layers(make_net, in_shape):
    r = rng(11)
    net = make_net(r)
    # keep relu inputs away from the kink
    x = r.standard_normal(in_shape) + 0.05
    assert grad_check(net, x, eps=EPS, rng=rng(12)) <= GC_TOL


def test_grad_check_lstm_unrolled_3_steps():
    r = rng(21)
    cell = LSTM(3, 4, r, dtype=np.float64)
    xs = r.standard_normal((3, 2, 3))
    probe = r.standard_normal((2, 4))

    def loss_fn():
        cell.zero_grads()
        cell.reset_cache()
        h, c = cell.zero_state(2, dtype=np.float64)
        for t in range(3):
            h, c = cell.step(xs[t], h, c)
        loss = float((h * probe).sum())
        cell.backward_seq(None, gh_final=probe)
        return loss, [g.copy() for g in cell.grad_arrays()]

    assert grad_check_fn(loss_fn, cell.param_arrays(), eps=EPS) <= GC_TOL


def test_lstm_input_grads_match_finite_differences():
    r = rng(31)
    cell = LSTM(3, 4, r, dtype=np.float64)
    xs = r.standard_normal((3, 2, 3))
    probe = r.standard_normal((2, 4))

    def run(inputs):
        cell.reset_cache()
        h, c = cell.zero_state(2, dtype=np.float64)
        for t in range(3):
            h, c = cell.step(inputs[t], h, c, cache=False)
        return float((h * probe).sum())

    cell.zero_grads()
    cell.reset_cache()
    h, c = cell.zero_state(2, dtype=np.float64)
    for t in range(3):
        h, c = cell.step(xs[t], h, c)
    gx = cell.backward_seq(None, gh_final=probe)

    worst = 0.0
    for t in range(3):
        for idx in np.ndindex(xs[t].shape):
            orig = xs[t][idx]
            xs[t][idx] = orig + EPS
            up = run(xs)
            xs[t][idx] = orig - EPS
            down = run(xs)
            xs[t][idx] = orig
            num = (up - down) / (2 * EPS)
            worst = max(worst, abs(num - gx[t][idx]) / max(abs(num), abs(gx[t][idx]), 1e-2))
    assert worst <= GC_TOL


def test_grad_check_random_compositions():
    # randomized small chains over all layer kinds
    r = rng(41)
    for trial in range(5):
        layers = [Dense(6, 6, r, dtype=np.float64)]
        for _ in range(int(r.integers(1, 4))):
            layers.append(r.choice([ReLU, Tanh, Softmax])())
            layers.append(Dense(6, 6, r, dtype=np.float64))
        net = Sequential(layers)
        x = r.standard_normal((2, 6)) + 0.05
        assert grad_check(net, x, eps=EPS, rng=rng(42 + trial)) <= GC_TOL


# ------------------------------------------------------------------- adam


def test_adam_zero_grad_is_noop_on_params():
    p = rng(0).standard_normal(7).astype(np.float32)
    before = p.copy()
    st = AdamState(7, lr=0.1)
    adam_step(p, np.zeros(7, dtype=np.float32), st)
    np.testing.assert_array_equal(p, before)
    assert st.t == 1


def test_adam_single_step_closed_form():
    # constant gradient from a fresh state: bias-corrected moments cancel,
    # update is exactly -lr * g / (|g| + eps)
    g = np.array([0.3, -2.0, 5.0], dtype=np.float32)
    p = np.zeros(3, dtype=np.float32)
    st = AdamState(3, lr=0.01)
    adam_step(p, g, st)
    expected = -0.01 * g / (np.abs(g) + st.eps)
    np.testing.assert_allclose(p, expected, rtol=1e-5)


def test_adam_quadratic_descent():
    # f(w) = w^2 from w=1, lr=0.1: |w| strictly decreases for 10 steps
    w = np.array([1.0], dtype=np.float32)
    st = AdamState(1, lr=0.1)
    prev = abs(float(w[0]))
    for _ in range(10):
        adam_step(w, 2.0 * w, st)
        cur = abs(float(w[0]))
        assert cur < prev
        prev = cur


def test_adam_nan_grads_abort():
    p = np.zeros(3, dtype=np.float32)
    st = AdamState(3, lr=0.1)
    g = np.array([0.0, np.nan, 1.0], dtype=np.float32)
    with pytest.raises(FloatingPointError):
        adam_step(p, g, st)
    assert st.t == 0
    np.testing.assert_array_equal(p, np.zeros(3, dtype=np.float32))


# ---------------------------------------------------------- serialization


def test_save_load_round_trip(tmp_path):
    net = Sequential([Dense(3, 4, rng(0)), Tanh(), Dense(4, 2, rng(1))])
    path = tmp_path / "model.bin"
    save_model(path, net.spec(), net.param_arrays())
    spec, flat = load_model(path, expected_spec=net.spec())
    assert spec == net.spec()
    np.testing.assert_array_equal(flat, flatten_arrays(net.param_arrays()))


def test_load_rejects_spec_mismatch(tmp_path):
    net = Sequential([Dense(3, 4, rng(0))])
    other = Sequential([Dense(4, 3, rng(0))])
    path = tmp_path / "model.bin"
    save_model(path, net.spec(), net.param_arrays())
    with pytest.raises(ValueError, match="spec mismatch"):
        load_model(path, expected_spec=other.spec())


def test_load_rejects_garbage(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a model at all")
    with pytest.raises(ValueError, match="bad magic"):
        load_model(path)


def test_flatten_unflatten_round_trip():
    arrays = [rng(0).standard_normal((3, 4)).astype(np.float32), rng(1).standard_normal(5).astype(np.float32)]
    flat = flatten_arrays(arrays)
    targets = [np.zeros_like(a) for a in arrays]
    unflatten_into(flat, targets)
    for a, b in zip(arrays, targets):
        np.testing.assert_array_equal(a, b)
