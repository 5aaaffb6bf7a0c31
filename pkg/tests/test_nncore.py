import numpy as np
import pytest

from lleaks import losses, models
from lleaks.nncore import (
    CheckpointError,
    Gradients,
    Layer,
    Network,
    SgdConfig,
    ShapeError,
    backward,
    finite_difference_full,
    finite_difference_grad,
    forward,
    init_network,
    load_network,
    save_network,
    sgd_step,
)


def dense_net(w, b, num_classes, input_dim):
    layer = Layer("dense", np.asarray(w, dtype=float), np.asarray(b, dtype=float))
    return Network([layer], "adhoc", num_classes, (input_dim,))


def two_layer_net(w1, b1, w2, b2):
    layers = [
        Layer("dense", np.asarray(w1, float), np.asarray(b1, float)),
        Layer("relu"),
        Layer("dense", np.asarray(w2, float), np.asarray(b2, float)),
    ]
    return Network(layers, "adhoc", len(b2), (np.asarray(w1).shape[1],))


def manual_matmul(x, w, b):
    # independent reference: plain Python loops, no numpy arithmetic
    n, fin = len(x), len(x[0])
    fout = len(w)
    out = [[0.0] * fout for _ in range(n)]
    for i in range(n):
        for o in range(fout):
            acc = b[o]
            for k in range(fin):
                acc += x[i][k] * w[o][k]
            out[i][o] = acc
    return out


def test_forward_identity_dense():
    net = dense_net(np.eye(2), [0.0, 0.0], 2, 2)
    out = forward(net, np.array([[1.0, 2.0]]))
    assert np.array_equal(out, np.array([[1.0, 2.0]]))


def test_forward_zero_weights():
    net = dense_net(np.zeros((3, 4)), np.zeros(3), 3, 4)
    out = forward(net, np.random.default_rng(0).normal(size=(5, 4)))
    assert np.array_equal(out, np.zeros((5, 3)))


def test_forward_two_layer_hand_traced():
    w1 = [[0.5, -1.0], [2.0, 0.25], [1.0, 1.0]]
    b1 = [0.1, -0.2, 0.0]
    w2 = [[1.0, -1.0, 0.5], [0.0, 2.0, -0.5]]
    b2 = [0.05, -0.05]
    net = two_layer_net(w1, b1, w2, b2)
    x = [[1.0, 0.0]]
    h = manual_matmul(x, w1, b1)
    h = [[max(v, 0.0) for v in row] for row in h]
    expected = manual_matmul(h, w2, b2)
    got = forward(net, np.array(x))
    assert np.allclose(got, expected, rtol=0, atol=1e-15)
    # frozen values from the manual trace: h=[0.6, 1.8, 1.0], logits below
    assert got[0] == pytest.approx([-0.65, 3.05], abs=1e-12)


def test_forward_rejects_bad_input_shape():
    net = dense_net(np.eye(2), [0.0, 0.0], 2, 2)
    with pytest.raises(ShapeError, match="input"):
        forward(net, np.zeros((1, 3)))


def test_forward_names_offending_layer():
    layers = [
        Layer("dense", np.zeros((4, 2)), np.zeros(4)),
        Layer("dense", np.zeros((3, 5)), np.zeros(3)),  # expects 5, gets 4
    ]
    net = Network(layers, "adhoc", 3, (2,))
    with pytest.raises(ShapeError, match="layer 1"):
        forward(net, np.zeros((1, 2)))


def test_backward_zero_upstream():
    net = models.build_arch("fc-only", (1, 6, 6), 3, seed=0)
    batch = np.random.default_rng(1).normal(size=(2, 1, 6, 6))
    grads = backward(net, batch, np.zeros((2, 3)))
    for entry in grads.entries:
        if entry is not None:
            assert np.array_equal(entry[0], np.zeros_like(entry[0]))
            assert np.array_equal(entry[1], np.zeros_like(entry[1]))


def test_backward_dense_outer_product():
    rng = np.random.default_rng(2)
    net = dense_net(rng.normal(size=(3, 4)), rng.normal(size=3), 3, 4)
    x = rng.normal(size=(1, 4))
    up = rng.normal(size=(1, 3))
    grads = backward(net, x, up)
    dw, db = grads.entries[0]
    assert np.allclose(dw, np.outer(up[0], x[0]))
    assert np.allclose(db, up[0])


@pytest.mark.parametrize("arch,input_shape", [
    ("lenet5", (1, 16, 16)),
    ("shadow-nn", (1, 10, 10)),
    ("fc-only", (1, 8, 8)),
    ("vgg-mini", (1, 16, 16)),
    ("mlp-tabular", (17,)),
])
def test_backward_matches_finite_differences(arch, input_shape):
    rng = np.random.default_rng(hash(arch) % 2**32)
    net = models.build_arch(arch, input_shape, 4, seed=5)
    batch = rng.normal(size=(3,) + input_shape)
    up = rng.normal(size=(3, 4))

    grads = backward(net, batch, up)

    def loss_fn(logits):
        return float((logits * up).sum())

    # spot-check 25 random parameter coordinates per architecture
    coords = []
    for li, layer in enumerate(net.layers):
        if layer.has_params:
            coords += [(li, "w", i) for i in range(layer.w.size)]
            coords += [(li, "b", i) for i in range(layer.b.size)]
    for k in rng.choice(len(coords), size=25, replace=False):
        li, name, flat = coords[k]
        numeric = finite_difference_grad(net, loss_fn, batch, (li, name, flat))
        analytic = grads.entries[li][0 if name == "w" else 1].flat[flat]
        assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-7)


def test_backward_every_entry_tiny_net():
    rng = np.random.default_rng(3)
    net = two_layer_net(rng.normal(size=(3, 2)), rng.normal(size=3),
                        rng.normal(size=(2, 3)), rng.normal(size=2))
    batch = rng.normal(size=(4, 2))
    up = rng.normal(size=(4, 2))
    grads = backward(net, batch, up)
    numeric = finite_difference_full(net, lambda lg: float((lg * up).sum()), batch)
    for g, fd in zip(grads.entries, numeric.entries):
        if g is None:
            continue
        assert np.allclose(g[0], fd[0], rtol=1e-4, atol=1e-7)
        assert np.allclose(g[1], fd[1], rtol=1e-4, atol=1e-7)


def test_finite_difference_quadratic_exact():
    # quadratic loss on a linear model differences exactly up to rounding
    net = dense_net([[2.0]], [0.5], 1, 1)
    batch = np.array([[3.0]])

    def loss_fn(logits):
        return float((logits ** 2).sum())

    # d/dw of (w*3 + 0.5)^2 = 2*(w*3+0.5)*3 = 39 at w=2
    got = finite_difference_grad(net, loss_fn, batch, (0, "w", 0))
    assert got == pytest.approx(39.0, abs=1e-9 * 39.0)


def test_finite_difference_constant_loss_zero():
    net = dense_net(np.eye(2), np.zeros(2), 2, 2)
    got = finite_difference_grad(net, lambda lg: 7.0, np.ones((1, 2)), (0, "w", 0))
    assert got == 0.0


def test_finite_difference_cross_entropy_self_consistency():
    rng = np.random.default_rng(4)
    net = dense_net(rng.normal(size=(3, 5)), rng.normal(size=3), 3, 5)
    batch = rng.normal(size=(2, 5))
    labels = np.array([0, 2])

    def loss_fn(logits):
        return losses.mean_cross_entropy(losses.softmax(logits), labels)

    logits = forward(net, batch)
    probs = losses.softmax(logits)
    up = (probs - losses.onehot(labels, 3)) / 2  # analytic dL/dlogits
    grads = backward(net, batch, up)
    for li, name, flat in [(0, "w", 0), (0, "w", 7), (0, "w", 14), (0, "b", 1)]:
        numeric = finite_difference_grad(net, loss_fn, batch, (li, name, flat))
        analytic = grads.entries[li][0 if name == "w" else 1].flat[flat]
        assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-7)


def test_sgd_single_step():
    net = dense_net([[1.0]], [0.0], 1, 1)
    grads = Gradients([(np.array([[1.0]]), np.array([0.0]))])
    cfg = SgdConfig(learning_rate=0.1, momentum=0.0)
    new, _ = sgd_step(net, grads, cfg, Gradients.zeros(net))
    assert new.layers[0].w[0, 0] == pytest.approx(0.9)
    assert net.layers[0].w[0, 0] == 1.0  # input untouched


def test_sgd_zero_grads_no_change():
    net = models.build_arch("mlp-tabular", (7,), 3, seed=1)
    new, _ = sgd_step(net, Gradients.zeros(net), SgdConfig(0.5, 0.9), Gradients.zeros(net))
    assert new.equal_weights(net)


def test_sgd_momentum_two_steps():
    # lr=0.1, momentum=0.9, g=1 twice: v1=1, th1=0.9; v2=1.9, th2=0.71
    net = dense_net([[1.0]], [0.0], 1, 1)
    cfg = SgdConfig(learning_rate=0.1, momentum=0.9)
    g = Gradients([(np.array([[1.0]]), np.array([0.0]))])
    vel = Gradients.zeros(net)
    net, vel = sgd_step(net, g, cfg, vel)
    assert net.layers[0].w[0, 0] == pytest.approx(0.9)
    net, vel = sgd_step(net, g, cfg, vel)
    assert net.layers[0].w[0, 0] == pytest.approx(0.71)


def test_sgd_shape_mismatch_rejected():
    net = dense_net([[1.0]], [0.0], 1, 1)
    bad = Gradients([(np.zeros((2, 2)), np.zeros(1))])
    with pytest.raises(ShapeError):
        sgd_step(net, bad, SgdConfig(0.1), Gradients.zeros(net))


def test_init_deterministic_per_seed():
    a = init_network("lenet5", (1, 28, 28), 10, seed=42)
    b = init_network("lenet5", (1, 28, 28), 10, seed=42)
    assert a.equal_weights(b)
    c = init_network("lenet5", (1, 28, 28), 10, seed=43)
    assert not a.equal_weights(c)


def test_init_unknown_arch_rejected():
    with pytest.raises(ValueError, match="unknown architecture"):
        init_network("nope", (4,), 2, seed=0)


def test_init_uniform_moments():
    # U(-a, a) with a = sqrt(1/fan_in) has variance a^2/3 = 1/(3*fan_in)
    net = init_network("mlp-tabular", (20,), 10, seed=9)
    w = net.layers[0].w  # 512 x 20 = 10240 samples
    fan_in = w.shape[1]
    var = w.var()
    assert abs(var - 1.0 / (3 * fan_in)) < 0.2 * (1.0 / (3 * fan_in))
    assert np.abs(w).max() <= np.sqrt(1.0 / fan_in)
    for layer in net.layers:
        if layer.has_params:
            assert np.array_equal(layer.b, np.zeros_like(layer.b))


@pytest.mark.parametrize("arch,input_shape", [
    ("lenet5", (1, 28, 28)),
    ("shadow-nn", (1, 28, 28)),
    ("fc-only", (1, 28, 28)),
    ("vgg-mini", (1, 28, 28)),
    ("mlp-tabular", (33,)),
])
def test_save_load_round_trip_bit_exact(arch, input_shape, tmp_path):
    net = init_network(arch, input_shape, 10, seed=3)
    path = tmp_path / "net.ckpt"
    save_network(net, path)
    loaded = load_network(path)
    assert loaded.arch_id == net.arch_id
    assert loaded.num_classes == net.num_classes
    assert tuple(loaded.input_shape) == tuple(net.input_shape)
    assert loaded.equal_weights(net)
    # a second save is byte-identical
    path2 = tmp_path / "net2.ckpt"
    save_network(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_load_bad_magic(tmp_path):
    net = init_network("mlp-tabular", (5,), 2, seed=0)
    path = tmp_path / "net.ckpt"
    save_network(net, path)
    data = bytearray(path.read_bytes())
    data[:4] = b"XXXX"
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="magic"):
        load_network(path)


def test_load_truncated(tmp_path):
    net = init_network("mlp-tabular", (5,), 2, seed=0)
    path = tmp_path / "net.ckpt"
    save_network(net, path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_network(path)


def test_load_shape_mismatch(tmp_path):
    net = init_network("mlp-tabular", (5,), 2, seed=0)
    path = tmp_path / "net.ckpt"
    save_network(net, path)
    data = bytearray(path.read_bytes())
    # first tensor header: rank u32 then dims; bump the first dim
    off = len(b"LLEAKS1\x00") + 4 + len("mlp-tabular") + 4 + 4 + 4
    rank = int.from_bytes(data[off:off + 4], "little")
    assert rank == 2
    dim0 = int.from_bytes(data[off + 4:off + 8], "little")
    data[off + 4:off + 8] = (dim0 + 1).to_bytes(4, "little")
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="shape descriptor mismatch"):
        load_network(path)


def test_forward_softmax_rows_are_simplex():
    rng = np.random.default_rng(11)
    net = models.build_arch("shadow-nn", (1, 10, 10), 7, seed=2)
    logits = forward(net, rng.normal(size=(9, 1, 10, 10)))
    probs = losses.softmax(logits)
    assert np.all(probs >= 0)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)
