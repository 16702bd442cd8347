import numpy as np
import pytest

from oracles import numerical_grad, rel_error
from yieldpaint.neural import (
    Activation,
    Adam,
    AvgPool2x2,
    BatchNorm,
    CacheError,
    Conv2d,
    Dense,
    Flatten,
    MaxPool2x2,
    Network,
    Reshape,
    Upsample2x2,
    load_checkpoint,
    mse_loss,
    save_checkpoint,
)


def _away_from_zero(rng, shape):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.05, 1.0, size=shape)


def _make(kind, rng):
    """(layer, input, train flag) for one random instantiation of a layer kind."""
    n = int(rng.integers(2, 4))
    if kind == "dense":
        d_in, d_out = 5, int(rng.integers(1, 6))
        layer = Dense(d_in, d_out)
        layer.init(rng, "he")
        layer.b = rng.normal(size=d_out)
        return layer, rng.normal(size=(n, d_in)), True
    h, w = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    c = int(rng.integers(1, 4))
    if kind == "conv2d":
        layer = Conv2d(c, int(rng.integers(1, 4)))
        layer.init(rng, "glorot")
        layer.b = rng.normal(size=layer.c_out)
        return layer, rng.normal(size=(n, h, w, c)), True
    if kind == "maxpool2x2":
        # distinct values so the argmax is stable under +-h perturbations
        x = rng.permutation(n * h * w * c).reshape(n, h, w, c) * 0.01 + rng.uniform(0, 1e-3, (n, h, w, c))
        return MaxPool2x2(), x, True
    if kind == "avgpool2x2":
        return AvgPool2x2(), rng.normal(size=(n, 2 * (h // 2 + 1), 2 * (w // 2 + 1), c)), True
    if kind == "upsample2x2":
        return Upsample2x2(), rng.normal(size=(n, h, w, c)), True
    if kind in ("batchnorm_train", "batchnorm_infer"):
        spatial = bool(rng.integers(2))
        x = rng.normal(size=(n, h, w, c) if spatial else (n + 2, c)) * 2 + 0.5
        layer = BatchNorm(c)
        layer.gamma = rng.uniform(0.5, 2, c)
        layer.beta = rng.normal(size=c)
        layer.running_mean = rng.normal(size=c)
        layer.running_var = rng.uniform(0.5, 2, c)
        return layer, x, kind == "batchnorm_train"
    if kind == "relu":
        return Activation("relu"), _away_from_zero(rng, (n, h, w, c)), True
    if kind == "sigmoid":
        return Activation("sigmoid"), rng.normal(size=(n, 5)) * 3, True
    if kind == "flatten":
        return Flatten(), rng.normal(size=(n, h, w, c)), True
    if kind == "reshape":
        return Reshape((w, h * c)), rng.normal(size=(n, h, w, c)), True
    raise KeyError(kind)


LAYER_KINDS = ["dense", "conv2d", "maxpool2x2", "avgpool2x2", "upsample2x2", "batchnorm_train",
               "batchnorm_infer", "relu", "sigmoid", "flatten", "reshape"]


def layer_gradient_error(layer, x, train, rng) -> float:
    out, _ = layer.forward(x, train)
    r = rng.normal(size=out.shape)

    def loss():
        return float((layer.forward(x, train)[0] * r).sum())

    _, cache = layer.forward(x, train)
    dx, grads = layer.backward(cache, r)
    errs = [rel_error(dx, numerical_grad(loss, x))]
    for name in layer.param_names:
        errs.append(rel_error(grads[name], numerical_grad(loss, getattr(layer, name))))
    return max(errs)


@pytest.mark.parametrize("kind", LAYER_KINDS)
def test_layer_gradients(kind):
    rng = np.random.default_rng(100 + LAYER_KINDS.index(kind))
    worst = max(layer_gradient_error(*_make(kind, rng), rng) for _ in range(20))
    assert worst <= 1e-5, f"{kind}: relative error {worst:.2e}"


def test_network_gradient_end_to_end():
    rng = np.random.default_rng(0)
    net = Network([Conv2d(2, 3), Activation("relu"), BatchNorm(3), MaxPool2x2(), Upsample2x2(),
                   Conv2d(3, 1), Activation("sigmoid")], (4, 4, 2)).initialize(rng)
    x = rng.normal(size=(3, 4, 4, 2))
    y = rng.random((3, 4, 4, 1))

    def loss():
        return mse_loss(net.forward(x, train=True)[0], y)[0]

    out, cache = net.forward(x, train=True)
    _, g = mse_loss(out, y)
    grads = net.backward(cache, g)
    for i, name, p in net.parameters():
        assert rel_error(grads[i][name], numerical_grad(loss, p)) <= 1e-5, (i, name)


def test_forward_examples():
    net = Network([Dense(4, 3), Activation("sigmoid")], (4,))
    out, _ = net.forward(np.random.default_rng(0).normal(size=(5, 4)))
    assert np.all(out == 0.5)
    d = Dense(4, 4)
    d.W = np.eye(4)
    x = np.random.default_rng(1).random((3, 4))
    assert np.array_equal(Network([d, Activation("relu")], (4,)).forward(x)[0], x)


def test_conv_averaging_kernel_on_constant_image():
    conv = Conv2d(1, 1)
    conv.W = np.full((1, 1, 3, 3), 1 / 9)
    out, _ = conv.forward(np.full((1, 6, 7, 1), 0.3), False)
    # zero 'same' padding: every cell whose 3x3 window lies inside the image is unchanged
    assert np.allclose(out[0, 1:-1, 1:-1, 0], 0.3, atol=1e-15)


def test_conv_matches_direct_correlation():
    rng = np.random.default_rng(2)
    conv = Conv2d(2, 3)
    conv.init(rng, "he")
    x = rng.normal(size=(2, 5, 4, 2))
    out, _ = conv.forward(x, False)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((2, 5, 4, 3))
    for i in range(5):
        for j in range(4):
            ref[:, i, j, :] = np.einsum("nabc,ocab->no", xp[:, i:i + 3, j:j + 3, :], conv.W)
    assert np.allclose(out, ref + conv.b, atol=1e-12)


def test_shape_errors_name_layer():
    with pytest.raises(ValueError, match="layer 1"):
        Network([Dense(4, 3), Dense(4, 2)], (4,))
    net = Network([Dense(4, 3)], (4,))
    with pytest.raises(ValueError, match="layer 0"):
        net.forward(np.zeros((2, 5)))


def test_pool_upsample_shape_law():
    assert MaxPool2x2().output_shape((13, 15, 2)) == (7, 8, 2)
    assert Upsample2x2().output_shape((7, 8, 2)) == (14, 16, 2)
    x = np.random.default_rng(3).normal(size=(2, 16, 16, 3))
    up, _ = Upsample2x2().forward(MaxPool2x2().forward(x, False)[0], False)
    assert up.shape == x.shape
    out, _ = MaxPool2x2().forward(np.random.default_rng(4).normal(size=(1, 5, 3, 1)), False)
    assert out.shape == (1, 3, 2, 1)


def test_mse_loss_examples():
    p = np.random.default_rng(5).normal(size=(4, 6))
    loss, g = mse_loss(p, p.copy())
    assert loss == 0 and not g.any()
    loss, _ = mse_loss(p + 1.0, p)
    assert loss == pytest.approx(1.0)
    t = np.random.default_rng(6).normal(size=(4, 6))
    _, g = mse_loss(p, t)
    num = numerical_grad(lambda: mse_loss(p, t)[0], p)
    assert rel_error(g, num) <= 1e-7
    with pytest.raises(ValueError):
        mse_loss(p, t[:2])


def _small_net(rng):
    return Network([Dense(5, 4), Activation("relu"), BatchNorm(4), Dense(4, 5), Activation("sigmoid")],
                   (5,)).initialize(rng)


def test_backward_zero_gradient_and_no_mutation():
    rng = np.random.default_rng(7)
    net = _small_net(rng)
    x = rng.normal(size=(6, 5))
    before = [p.copy() for _, _, p in net.arrays()]
    out, cache = net.forward(x, train=True)
    grads = net.backward(cache, np.zeros_like(out))
    assert all(not np.any(v) for g in grads for v in g.values())
    net.backward(cache, rng.normal(size=out.shape))
    assert all(np.array_equal(a, p) for a, (_, _, p) in zip(before, net.arrays()))


def test_backward_rejects_stale_or_missing_cache():
    rng = np.random.default_rng(8)
    net = _small_net(rng)
    x = rng.normal(size=(6, 5))
    out, cache = net.forward(x, train=True)
    with pytest.raises(CacheError):
        net.backward(None, out)
    grads = net.backward(cache, out)
    net.apply_update(Adam(), grads)
    with pytest.raises(CacheError, match="stale"):
        net.backward(cache, out)


def test_frozen_batchnorm_is_affine():
    rng = np.random.default_rng(9)
    bn = BatchNorm(3)
    bn.gamma, bn.beta = rng.uniform(0.5, 2, 3), rng.normal(size=3)
    bn.running_mean, bn.running_var = rng.normal(size=3), rng.uniform(0.5, 2, 3)
    x = rng.normal(size=(4, 3))
    dout = rng.normal(size=(4, 3))
    out, cache = bn.forward(x, train=False)
    scale = bn.gamma / np.sqrt(bn.running_var + bn.eps)
    assert np.allclose(out, x * scale + (bn.beta - bn.running_mean * scale))
    dx, grads = bn.backward(cache, dout)
    assert np.allclose(dx, dout * scale)
    assert np.allclose(grads["beta"], dout.sum(0))


def test_batchnorm_train_statistics():
    rng = np.random.default_rng(10)
    bn = BatchNorm(4)
    for shape in ((64, 4), (8, 5, 6, 4)):
        x = rng.normal(size=shape) * 3.0 + rng.normal(size=4) * 5
        out, _ = bn.forward(x, train=True)
        axes = tuple(range(out.ndim - 1))
        assert np.abs(out.mean(axis=axes)).max() <= 1e-7
        assert np.abs(out.var(axis=axes) - 1).max() <= 1e-5


def test_batchnorm_running_stats_only_on_commit():
    rng = np.random.default_rng(11)
    net = Network([Dense(3, 3), BatchNorm(3)], (3,)).initialize(rng)
    bn = net.layers[1]
    x = rng.normal(size=(10, 3)) + 4
    _, cache = net.forward(x, train=True)
    assert np.all(bn.running_mean == 0)
    net.commit_batch_stats(cache)
    h = net.layers[0].forward(x, True)[0]
    assert np.allclose(bn.running_mean, 0.1 * h.mean(0))
    assert np.allclose(bn.running_var, 0.9 + 0.1 * h.var(0, ddof=1))


def test_adam_zero_gradient():
    p = np.array([1.5, -2.0])
    opt = Adam(lr=0.1)
    opt.step([p], [np.zeros(2)])
    assert np.array_equal(p, [1.5, -2.0]) and opt.t == 1


def test_adam_hand_computed_scalar():
    p = np.array([0.5])
    opt = Adam(lr=0.01)
    g = 0.2
    opt.step([p], [np.array([g])])
    m = 0.1 * g / (1 - 0.9)
    v = 0.001 * g * g / (1 - 0.999)
    assert p[0] == pytest.approx(0.5 - 0.01 * m / (np.sqrt(v) + 1e-8), abs=1e-15)
    opt.step([p], [np.array([g])])
    m2 = (0.9 * 0.1 * g + 0.1 * g) / (1 - 0.81)
    v2 = (0.999 * 0.001 * g * g + 0.001 * g * g) / (1 - 0.999 ** 2)
    assert p[0] == pytest.approx(0.5 - 0.01 * 1.0 / (1 + 1e-8 / g) - 0.01 * m2 / (np.sqrt(v2) + 1e-8), abs=1e-14)


def test_adam_quadratic_bowl():
    w = np.array([1.0])
    opt = Adam(lr=0.05)
    for _ in range(500):
        opt.step([w], [2 * w])
    assert abs(w[0]) < 1e-3


def test_adam_decay_per_epoch():
    opt = Adam(lr=0.1, decay=0.1)
    opt.set_epoch(3)
    assert opt.lr == pytest.approx(0.1 * 0.9 ** 3)
    with pytest.raises(ValueError):
        Adam(decay=1.0)


def _train_steps(seed, steps=5):
    rng = np.random.default_rng(seed)
    net = _small_net(np.random.default_rng(seed))
    opt = Adam(lr=0.01)
    x, y = rng.normal(size=(16, 5)), rng.random((16, 5))
    for _ in range(steps):
        out, cache = net.forward(x, train=True)
        _, g = mse_loss(out, y)
        net.apply_update(opt, net.backward(cache, g))
        net.commit_batch_stats(cache)
    return net


def test_training_is_deterministic():
    a, b = _train_steps(3), _train_steps(3)
    assert all(np.array_equal(p, q) for (_, _, p), (_, _, q) in zip(a.arrays(), b.arrays()))


def test_checkpoint_round_trip(tmp_path):
    net = _train_steps(4)
    manifest, blob = save_checkpoint(net, tmp_path / "model", {"note": "x"})
    n_values = sum(a.size for _, _, a in net.arrays())
    assert blob.stat().st_size == 8 * n_values
    first = net.arrays()[0][2].ravel()[0]
    assert np.frombuffer(blob.read_bytes()[:8], "<f8")[0] == first
    back, meta = load_checkpoint(manifest)
    assert meta == {"note": "x"}
    x = np.random.default_rng(0).normal(size=(7, 5))
    assert np.array_equal(back.predict(x), net.predict(x))


def test_checkpoint_missing_names_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="nowhere.json"):
        load_checkpoint(tmp_path / "nowhere.json")
