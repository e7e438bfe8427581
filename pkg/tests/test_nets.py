import numpy as np
import pytest

from subflow.nets import Adam, Mlp, ScalarParam, load_params, param_count, save_params


def fd_param_grads(net, x, upstream, h=1e-5):
    out = np.zeros_like(net.params)
    for i in range(len(net.params)):
        net.params[i] += h
        fp = float(upstream @ net.forward(x))
        net.params[i] -= 2 * h
        fm = float(upstream @ net.forward(x))
        net.params[i] += h
        out[i] = (fp - fm) / (2 * h)
    return out


def test_zero_parameters_zero_output():
    net = Mlp([3, 4, 2])
    assert np.all(net.forward(np.ones(3)) == 0.0)


def test_identity_linear_layer():
    net = Mlp([3, 3])
    net._views(net.params)  # params laid out weight-then-bias
    net.params[:9] = np.eye(3).ravel()
    x = np.array([0.5, -1.0, 2.0])
    assert np.allclose(net.forward(x), x)


def test_small_net_matches_handwritten_forward():
    rng = np.random.default_rng(0)
    net = Mlp([2, 3, 1], rng=rng)
    x = rng.standard_normal(2)
    # independent straight-line reimplementation
    W1 = net.params[:6].reshape(3, 2)
    b1 = net.params[6:9]
    W2 = net.params[9:12].reshape(1, 3)
    b2 = net.params[12:13]
    z1 = W1 @ x + b1
    a1 = np.where(z1 >= 0, z1, 0.01 * z1)
    want = W2 @ a1 + b2
    assert np.allclose(net.forward(x), want, atol=1e-12)


def test_zero_upstream_leaves_grads_untouched():
    rng = np.random.default_rng(1)
    net = Mlp([2, 2, 2], rng=rng)
    net.zero_grad()
    net.backward(np.ones(2), np.zeros(2))
    assert np.all(net.grad == 0.0)


def test_scalar_linear_gradient():
    net = Mlp([1, 1])
    net.params[:] = [2.0, 0.0]  # w=2, b=0
    net.zero_grad()
    din = net.backward(np.array([3.0]), np.array([5.0]))
    assert net.grad[0] == pytest.approx(15.0)  # u * x
    assert net.grad[1] == pytest.approx(5.0)
    assert din[0] == pytest.approx(10.0)  # u * w


@pytest.mark.parametrize("activation", ["leaky_relu", "tanh"])
def test_gradcheck_random_nets(activation):
    rng = np.random.default_rng(20240 if activation == "leaky_relu" else 77)
    for trial in range(20):
        depth = int(rng.integers(1, 5))
        widths = [int(rng.integers(1, 9)) for _ in range(depth + 1)]
        net = Mlp(widths, activation=activation, rng=rng)
        x = rng.standard_normal(widths[0])
        up = rng.standard_normal(widths[-1])
        net.zero_grad()
        din = net.backward(x, up)
        rel = np.abs(net.grad - fd_param_grads(net, x, up))
        rel /= np.maximum(np.abs(fd_param_grads(net, x, up)), 1e-6)
        assert rel.max() < 1e-4, f"trial {trial} widths {widths}"
        # input gradient against finite differences too
        fd_in = np.zeros_like(x)
        for i in range(len(x)):
            xp, xm = x.copy(), x.copy()
            xp[i] += 1e-5
            xm[i] -= 1e-5
            fd_in[i] = float(up @ net.forward(xp) - up @ net.forward(xm)) / 2e-5
        assert np.abs(din - fd_in).max() < 1e-4


def test_dimension_mismatch_rejected():
    net = Mlp([3, 2])
    with pytest.raises(ValueError):
        net.forward(np.ones(4))
    _, cache = net.forward_cached(np.ones((1, 3)))
    with pytest.raises(ValueError):
        net.backward_cached(cache, np.ones((1, 3)))


def test_batched_matches_loop():
    rng = np.random.default_rng(5)
    net = Mlp([3, 5, 2], rng=rng)
    X = rng.standard_normal((7, 3))
    batched = net.forward_many(X)
    rows = np.stack([net.forward(x) for x in X])
    assert np.allclose(batched, rows, atol=1e-14)


def test_param_count_invariant():
    widths = [4, 7, 3]
    assert param_count(widths) == (4 + 1) * 7 + (7 + 1) * 3
    assert Mlp(widths).params.size == param_count(widths)


def test_adam_zero_gradient_keeps_params():
    rng = np.random.default_rng(2)
    net = Mlp([2, 2], rng=rng)
    before = net.params.copy()
    opt = Adam(net.params.size, lr=0.1)
    opt.step(net.params, np.zeros_like(net.params))
    assert np.array_equal(net.params, before)


def test_adam_descends_constant_gradient():
    params = np.zeros(3)
    opt = Adam(3, lr=0.01)
    g = np.array([1.0, -2.0, 0.5])
    for _ in range(50):
        opt.step(params, g)
    assert np.all(np.sign(params) == -np.sign(g))


def test_adam_scalar_quadratic():
    # independent oracle: run the scalar problem itself
    p = np.array([0.0])
    opt = Adam(1, lr=0.1)
    for _ in range(100):
        grad = 2 * (p - 3.0)
        opt.step(p, grad)
    assert abs(p[0] - 3.0) < 0.5


def test_adam_rejects_nonfinite():
    opt = Adam(2)
    with pytest.raises(FloatingPointError):
        opt.step(np.zeros(2), np.array([1.0, np.nan]))


def test_deterministic_training_trajectory():
    def workload():
        rng = np.random.default_rng(33)
        net = Mlp([3, 4, 1], rng=rng)
        opt = Adam(net.params.size, lr=1e-2)
        X = rng.standard_normal((8, 3))
        y = rng.standard_normal((8, 1))
        for _ in range(20):
            net.zero_grad()
            out, cache = net.forward_cached(X)
            net.backward_cached(cache, 2 * (out - y))
            opt.step(net.params, net.grad)
        return net.params.copy()

    a, b = workload(), workload()
    assert np.array_equal(a, b)


def test_param_blob_roundtrip():
    rng = np.random.default_rng(9)
    net = Mlp([2, 3], rng=rng)
    blob = save_params(net)
    assert blob[:5] == b"SFNET"
    other = Mlp([2, 3])
    load_params(blob, other)
    assert np.array_equal(net.params, other.params)
    with pytest.raises(ValueError):
        load_params(blob, Mlp([3, 3]))
    # documented little-endian layout: header then raw float64 payload
    payload = np.frombuffer(blob, dtype="<f8", offset=len(blob) - 8 * net.params.size)
    assert np.array_equal(payload, net.params)


def test_scalar_param_roundtrip():
    z = ScalarParam(1.5)
    blob = save_params(z)
    z2 = ScalarParam(0.0)
    load_params(blob, z2)
    assert z2.value == 1.5
