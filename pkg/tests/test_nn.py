import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from icldiag.errors import ConfigError, UsageError
from icldiag.nn import (
    AdamState,
    BatchNorm,
    DenseLayer,
    DenseNet,
    adam_step,
    build_mlp,
    l2_normalize_rows,
    load_net,
    save_net,
    softmax,
    softmax_cross_entropy,
)


def _single_layer(activation="linear", slope=0.01):
    return DenseNet(
        [DenseLayer(weight=np.array([[2.0]]), bias=np.array([1.0]), activation=activation, slope=slope)]
    )


def test_forward_single_linear_layer():
    net = _single_layer()
    out, _ = net.forward(np.array([[-1.0]]))
    assert out == pytest.approx(np.array([[-1.0]]))


def test_forward_leaky_relu_negative_side():
    net = _single_layer(activation="leaky-relu", slope=0.01)
    out, _ = net.forward(np.array([[-1.0]]))
    assert out == pytest.approx(np.array([[-0.01]]))


def test_identity_network_passes_input_through():
    net = DenseNet([DenseLayer(weight=np.eye(3), bias=np.zeros(3))])
    X = np.random.default_rng(0).normal(size=(4, 3))
    out, _ = net.forward(X)
    np.testing.assert_array_equal(out, X)


def test_batchnorm_train_mode_centers_and_scales():
    # no affine change (gamma 1, beta 0), epsilon ~ 0: batch [[1],[3]] -> [[-1],[1]]
    bn = BatchNorm.identity(1, epsilon=1e-16)
    net = DenseNet([DenseLayer(weight=np.eye(1), bias=np.zeros(1), batchnorm=bn)])
    out, _ = net.forward(np.array([[1.0], [3.0]]))
    assert out == pytest.approx(np.array([[-1.0], [1.0]]))


def test_batchnorm_train_mode_needs_two_rows():
    bn = BatchNorm.identity(1)
    net = DenseNet([DenseLayer(weight=np.eye(1), bias=np.zeros(1), batchnorm=bn)])
    with pytest.raises(UsageError):
        net.forward(np.array([[1.0]]))


def test_forward_dimension_mismatch_is_config_error():
    net = _single_layer()
    with pytest.raises(ConfigError):
        net.forward(np.ones((2, 3)))


def test_layer_chain_mismatch_rejected():
    l1 = DenseLayer(weight=np.ones((2, 3)), bias=np.zeros(2))
    l2 = DenseLayer(weight=np.ones((2, 5)), bias=np.zeros(2))
    with pytest.raises(ConfigError):
        DenseNet([l1, l2])


def test_backward_linear_loss_gradients():
    # loss = sum of outputs -> dL/dW = ones(out,1) summed input rows, dL/db = n
    rng = np.random.default_rng(1)
    X = rng.normal(size=(5, 3))
    net = DenseNet([DenseLayer(weight=rng.normal(size=(2, 3)), bias=np.zeros(2))])
    out, cache = net.forward(X)
    grads = net.backward(cache, np.ones_like(out))
    np.testing.assert_allclose(grads[0], np.tile(X.sum(axis=0), (2, 1)))
    np.testing.assert_allclose(grads[1], np.full(2, 5.0))


def test_backward_zero_input_gives_zero_weight_grad():
    net = DenseNet([DenseLayer(weight=np.ones((2, 3)), bias=np.zeros(2))])
    out, cache = net.forward(np.zeros((4, 3)))
    grads = net.backward(cache, np.ones_like(out))
    np.testing.assert_array_equal(grads[0], np.zeros((2, 3)))


def test_backward_without_cache_is_usage_error():
    net = _single_layer()
    with pytest.raises(UsageError):
        net.backward(None, np.ones((1, 1)))


def _finite_difference_check(net, X, step=1e-4, tol=1e-4):
    rng = np.random.default_rng(99)
    R = rng.normal(size=(X.shape[0], net.out_size))
    out, cache = net.forward(X, update_running=False)
    grads = net.backward(cache, R)
    params = net.parameters()

    def objective():
        o, _ = net.forward(X, update_running=False)
        return float((o * R).sum())

    worst = 0.0
    for arr, g in zip(params, grads):
        flat, gf = arr.ravel(), g.ravel()
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            lp = objective()
            flat[i] = old - step
            lm = objective()
            flat[i] = old
            fd = (lp - lm) / (2 * step)
            worst = max(worst, abs(fd - gf[i]) / max(abs(fd), abs(gf[i]), 1e-3))
    assert worst < tol, f"worst relative gradient error {worst:.3e}"


@pytest.mark.parametrize(
    "sizes,acts,bns",
    [
        ([4, 8, 3], ["leaky-relu", "linear"], [True, False]),
        ([5, 16, 16, 2], ["relu", "leaky-relu", "linear"], [False, True, False]),
        ([3, 6, 4], ["linear", "linear"], [True, True]),
    ],
)
def test_gradient_matches_finite_differences(sizes, acts, bns):
    net = build_mlp(sizes, acts, bns, seed=7)
    X = np.random.default_rng(11).normal(size=(6, sizes[0]))
    _finite_difference_check(net, X)


def test_training_determinism_bit_identical():
    def run():
        net = build_mlp([4, 8, 2], ["leaky-relu", "linear"], [True, False], seed=3)
        state = AdamState(lr=0.01)
        rng = np.random.default_rng(5)
        X = rng.normal(size=(16, 4))
        y = rng.integers(0, 2, size=16)
        for _ in range(20):
            logits, cache = net.forward(X)
            _, dlog = softmax_cross_entropy(logits, y)
            adam_step(net.parameters(), net.backward(cache, dlog), state)
        return [p.copy() for p in net.parameters()]

    a, b = run(), run()
    for pa, pb in zip(a, b):
        np.testing.assert_array_equal(pa, pb)


def test_parameters_stay_finite_after_training_steps():
    net = build_mlp([4, 8, 2], ["leaky-relu", "linear"], [True, False], seed=3)
    state = AdamState(lr=0.05)
    rng = np.random.default_rng(5)
    X = rng.normal(size=(32, 4))
    y = rng.integers(0, 2, size=32)
    for _ in range(50):
        logits, cache = net.forward(X)
        _, dlog = softmax_cross_entropy(logits, y)
        adam_step(net.parameters(), net.backward(cache, dlog), state)
    assert net.check_finite()


def test_infer_mode_output_independent_of_batch_composition():
    net = build_mlp([4, 8, 3], ["leaky-relu", "linear"], [True, False], seed=2)
    rng = np.random.default_rng(0)
    # drive the running statistics away from their init
    for _ in range(5):
        net.forward(rng.normal(size=(10, 4)))
    X = rng.normal(size=(7, 4))
    batch_out = net.infer(X)
    for i in range(X.shape[0]):
        solo = net.infer(X[i : i + 1])
        np.testing.assert_allclose(solo[0], batch_out[i], rtol=0, atol=1e-12)


def test_adam_first_step_is_lr_times_sign():
    p = [np.array([1.0])]
    g = [np.array([0.5])]
    state = AdamState(lr=0.1)
    adam_step(p, g, state)
    assert state.t == 1
    assert p[0][0] == pytest.approx(1.0 - 0.1, abs=1e-7)  # ~ -lr * sign(g)


def test_adam_zero_gradient_leaves_parameter_unchanged():
    p = [np.array([2.5])]
    state = AdamState(lr=0.1)
    adam_step(p, [np.array([0.0])], state)
    assert p[0][0] == 2.5


def test_adam_two_steps_match_scalar_reference():
    # independent scalar Adam, constant gradient 1.0, lr 0.1
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    theta, m, v = 0.0, 0.0, 0.0
    expected = []
    for t in range(1, 3):
        m = b1 * m + (1 - b1) * 1.0
        v = b2 * v + (1 - b2) * 1.0
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        theta -= lr * mhat / (np.sqrt(vhat) + eps)
        expected.append(theta)

    p = [np.array([0.0])]
    state = AdamState(lr=lr)
    for t in range(2):
        adam_step(p, [np.array([1.0])], state)
        assert p[0][0] == pytest.approx(expected[t], rel=1e-12)


def test_adam_shape_mismatch_is_usage_error():
    state = AdamState()
    with pytest.raises(UsageError):
        adam_step([np.zeros(2)], [np.zeros(3)], state)


def test_l2_normalize_examples():
    np.testing.assert_allclose(l2_normalize_rows(np.array([[3.0, 4.0]])), [[0.6, 0.8]])
    unit = np.array([[1.0, 0.0]])
    np.testing.assert_allclose(l2_normalize_rows(unit), unit)
    np.testing.assert_array_equal(l2_normalize_rows(np.array([[0.0, 0.0]])), [[0.0, 0.0]])


@given(
    arrays(
        np.float64,
        st.tuples(st.integers(1, 8), st.integers(1, 6)),
        elements=st.floats(-1e6, 1e6),
    )
)
def test_l2_normalize_rows_unit_or_zero(X):
    normed = l2_normalize_rows(X)
    norms = np.linalg.norm(normed, axis=1)
    assert np.all((np.abs(norms - 1.0) < 1e-9) | (norms == 0.0))


def test_softmax_cross_entropy_uniform_logits():
    loss, _ = softmax_cross_entropy(np.zeros((3, 4)), np.array([0, 1, 3]))
    assert loss == pytest.approx(np.log(4.0))


def test_softmax_cross_entropy_hand_value():
    loss, _ = softmax_cross_entropy(np.array([[1.0, 0.0]]), np.array([0]))
    assert loss == pytest.approx(np.log(1.0 + np.exp(-1.0)))


def test_softmax_cross_entropy_margin_limit():
    prev = np.inf
    for margin in (1.0, 5.0, 20.0, 80.0):
        loss, _ = softmax_cross_entropy(np.array([[margin, 0.0]]), np.array([0]))
        assert loss < prev
        prev = loss
    assert prev == pytest.approx(0.0, abs=1e-30)


def test_softmax_cross_entropy_label_out_of_range():
    with pytest.raises(UsageError):
        softmax_cross_entropy(np.zeros((1, 2)), np.array([2]))


def test_softmax_cross_entropy_gradient_form():
    rng = np.random.default_rng(4)
    Z = rng.normal(size=(6, 3))
    y = rng.integers(0, 3, size=6)
    _, grad = softmax_cross_entropy(Z, y)
    manual = softmax(Z)
    manual[np.arange(6), y] -= 1.0
    np.testing.assert_allclose(grad, manual / 6.0)


@given(
    arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 5)), elements=st.floats(-50, 50))
)
def test_softmax_rows_sum_to_one(Z):
    np.testing.assert_allclose(softmax(Z).sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=25)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 5)), elements=st.floats(-50, 50)),
    st.integers(0, 10_000),
)
def test_cross_entropy_nonnegative(Z, seed):
    y = np.random.default_rng(seed).integers(0, Z.shape[1], size=Z.shape[0])
    loss, _ = softmax_cross_entropy(Z, y)
    assert loss >= 0.0


def test_checkpoint_roundtrip_with_adam(tmp_path):
    net = build_mlp([4, 8, 2], ["leaky-relu", "linear"], [True, False], seed=3)
    state = AdamState(lr=0.01)
    rng = np.random.default_rng(5)
    X = rng.normal(size=(16, 4))
    y = rng.integers(0, 2, size=16)
    for _ in range(3):
        logits, cache = net.forward(X)
        _, dlog = softmax_cross_entropy(logits, y)
        adam_step(net.parameters(), net.backward(cache, dlog), state)
    path = tmp_path / "net.ckpt"
    save_net(net, path, adam=state)
    loaded, adam = load_net(path)
    for pa, pb in zip(net.parameters(), loaded.parameters()):
        np.testing.assert_array_equal(pa, pb)
    for la, lb in zip(net.layers, loaded.layers):
        if la.batchnorm is not None:
            np.testing.assert_array_equal(la.batchnorm.running_mean, lb.batchnorm.running_mean)
            np.testing.assert_array_equal(la.batchnorm.running_var, lb.batchnorm.running_var)
    assert adam.t == state.t
    for ma, mb in zip(state.m, adam.m):
        np.testing.assert_array_equal(ma, mb)
    # loaded net computes the same infer output
    np.testing.assert_array_equal(net.infer(X), loaded.infer(X))


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ConfigError):
        load_net(path)
