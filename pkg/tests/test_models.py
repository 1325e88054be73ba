import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from oracles import numeric_grad, rel_error
from signforge.models import (
    FORMAT_VERSION,
    MAGIC,
    AdversarialCNN,
    ArchitectureMismatchError,
    BadMagicError,
    DeepCNN,
    ModelFormatError,
    ModelState,
    Network,
    TruncatedFileError,
    VersionMismatchError,
    build_adversarial_cnn,
    build_deep_cnn,
    dump_model_bytes,
    estimator_for,
    forward_logits,
    gradient_wrt_input,
    jacobian_wrt_input,
    load_estimator,
    load_model,
    load_model_bytes,
    predict_proba,
    save_model,
    shape_trace,
    train,
)
from signforge.numcore import LayerSpec, OptimizerConfig, ParameterError, entropy_bits, temperature_softmax

# (layer kind, output shape) for every layer of both networks, 43 classes, full width
ADVERSARIAL_TABLE = [
    ("Conv2D", (16, 16, 64)),
    ("ReLU", (16, 16, 64)),
    ("Conv2D", (6, 6, 128)),
    ("ReLU", (6, 6, 128)),
    ("Conv2D", (2, 2, 128)),
    ("ReLU", (2, 2, 128)),
    ("Flatten", (512,)),
    ("Dense", (1024,)),
    ("ReLU", (1024,)),
    ("Dense", (43,)),
]
DEEP_TABLE = [
    ("Conv2D", (32, 32, 32)),
    ("ReLU", (32, 32, 32)),
    ("Conv2D", (32, 32, 32)),
    ("ReLU", (32, 32, 32)),
    ("MaxPool2D", (16, 16, 32)),
    ("Dropout", (16, 16, 32)),
    ("Conv2D", (16, 16, 64)),
    ("ReLU", (16, 16, 64)),
    ("Conv2D", (16, 16, 64)),
    ("ReLU", (16, 16, 64)),
    ("Dropout", (16, 16, 64)),
    ("Flatten", (16384,)),
    ("Dense", (256,)),
    ("Dropout", (256,)),
    ("Dense", (43,)),
    ("ReLU", (43,)),
    ("TemperatureScale", (43,)),
]


@pytest.fixture(scope="module")
def small_deep():
    return build_deep_cnn(5, T=1.0, seed=3, width=0.25, relu_logits=False)


@pytest.fixture(scope="module")
def small_adv():
    return build_adversarial_cnn(5, seed=4, width=0.25)


def _images(n, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (n, 32, 32, 3))


# --------------------------------------------------------------------------
# architectures


@pytest.mark.parametrize("builder,table", [
    (lambda: build_adversarial_cnn(43, 0), ADVERSARIAL_TABLE),
    (lambda: build_deep_cnn(43, 1.0, 0), DEEP_TABLE),
])
def test_layer_by_layer_shapes(builder, table):
    state = builder()
    assert [s.kind for s in state.layers] == [k for k, _ in table]
    assert shape_trace(state.layers) == [s for _, s in table]


def test_flatten_widths():
    assert build_adversarial_cnn(43, 0).flatten_width() == 512
    assert build_deep_cnn(43, 1.0, 0).flatten_width() == 16384
    assert build_deep_cnn(43, 1.0, 0).weights["12.weight"].shape == (16384, 256)


def test_adversarial_cnn_conv_hyperparameters():
    convs = [s for s in build_adversarial_cnn(43, 0).layers if s.kind == "Conv2D"]
    assert [(s.kernel, s.filters, s.stride, s.padding) for s in convs] == [
        ((8, 8), 64, (2, 2), "same"), ((6, 6), 128, (2, 2), "valid"), ((5, 5), 128, (1, 1), "valid")]


def test_deep_cnn_dropout_rates_and_temperature():
    state = build_deep_cnn(43, 100.0, 0)
    assert [s.p for s in state.layers if s.kind == "Dropout"] == [0.25, 0.25, 0.5]
    assert state.layers[-1].temperature == 100.0


def test_width_multiplier_scales_filters():
    state = build_deep_cnn(8, 1.0, 0, width=0.5)
    assert shape_trace(state.layers)[11] == (8192,)
    assert build_adversarial_cnn(8, 0, width=0.5).flatten_width() == 256


def test_builders_reject_bad_arguments():
    with pytest.raises(ParameterError):
        build_deep_cnn(43, 0.0, 0)
    with pytest.raises(ParameterError):
        build_adversarial_cnn(1, 0)


def test_same_seed_bit_identical_weights():
    a, b = build_adversarial_cnn(43, 11), build_adversarial_cnn(43, 11)
    assert all(np.array_equal(a.weights[k], b.weights[k]) for k in a.weights)
    c = build_adversarial_cnn(43, 12)
    assert not np.array_equal(a.weights["0.kernel"], c.weights["0.kernel"])


def test_forward_gives_43_way_distribution():
    state = build_adversarial_cnn(43, 0)
    p = predict_proba(state, _images(3))
    assert p.shape == (3, 43)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


# --------------------------------------------------------------------------
# temperature


def test_t1_layer_is_identity(small_deep):
    X = _images(4)
    net = Network(small_deep)
    np.testing.assert_array_equal(net.forward(X), net.forward(X, stop=net.logit_index))
    np.testing.assert_allclose(predict_proba(small_deep, X), temperature_softmax(forward_logits(small_deep, X)), atol=0)


def test_mean_entropy_strictly_increases_with_temperature():
    state = build_deep_cnn(43, 1.0, seed=5)
    X = _images(6, seed=1)
    h = [entropy_bits(predict_proba(state, X, T)).mean() for T in (1.0, 10.0, 100.0)]
    assert h[0] < h[1] < h[2]


def test_argmax_independent_of_temperature(small_deep):
    X = _images(8, seed=2)
    ref = predict_proba(small_deep, X).argmax(1)
    for T in (0.5, 10.0, 100.0):
        np.testing.assert_array_equal(predict_proba(small_deep.with_temperature(T), X).argmax(1), ref)


def test_with_temperature_only_for_deep(small_adv):
    with pytest.raises(ParameterError):
        small_adv.with_temperature(10.0)


# --------------------------------------------------------------------------
# training


def _toy_separable(seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 0.1, (20, 32, 32, 3))
    X[:10, :, :16] += 0.4
    X[10:, :, 16:] += 0.4
    return X, np.repeat([0, 1], 10)


@pytest.mark.parametrize("seed", range(3))
def test_one_epoch_on_separable_toy(seed):
    X, y = _toy_separable()
    est = AdversarialCNN(width=0.25, epochs=1, batch_size=2, random_state=seed).fit(X, y)
    assert est.score(X, y) > 0.9


def test_zero_learning_rate_leaves_weights_and_curve_flat():
    X, y = _toy_separable()
    state = build_adversarial_cnn(2, 0, width=0.25)
    before = {k: v.copy() for k, v in state.weights.items()}
    _, curve = train(state, X, y, OptimizerConfig(learning_rate=0.0, epochs=3, batch_size=4))
    assert all(np.array_equal(before[k], state.weights[k]) for k in before)
    assert np.ptp(curve[:, 1]) == 0.0


def test_training_is_deterministic_given_seed():
    X, y = _toy_separable()
    a = DeepCNN(width=0.25, epochs=1, batch_size=5, random_state=9, relu_logits=False).fit(X, y)
    b = DeepCNN(width=0.25, epochs=1, batch_size=5, random_state=9, relu_logits=False).fit(X, y)
    assert a.state_.fingerprint() == b.state_.fingerprint()
    np.testing.assert_array_equal(a.loss_curve_, b.loss_curve_)


def test_training_records_manifest():
    X, y = _toy_separable()
    est = AdversarialCNN(width=0.25, epochs=2, batch_size=4, random_state=1).fit(X, y)
    hist = est.state_.training_manifest["history"][-1]
    assert hist["epochs"] == 2 and hist["samples"] == 20
    assert set(hist["optimizer"]) >= {"learning_rate", "momentum", "decay", "batch_size", "rng_seed"}
    assert len(hist["dataset_hash"]) == 64


def test_loss_decreases_on_desk_synthetic():
    from signforge.dataio import generate_synthetic, rebalance

    train_set, _ = generate_synthetic(8, 200, seed=0)
    train_set = rebalance(train_set, np.random.default_rng(1))
    est = AdversarialCNN(width=0.25, epochs=5, learning_rate=0.03, random_state=1).fit(train_set.X, train_set.y)
    assert est.loss_curve_[4, 0] < est.loss_curve_[0, 0]
    assert est.loss_curve_[4, 1] < est.loss_curve_[0, 1]


def test_train_input_errors(small_adv):
    with pytest.raises(ValueError):
        train(small_adv.copy(), np.zeros((0, 32, 32, 3)), np.zeros(0, int), OptimizerConfig())
    with pytest.raises(ValueError):
        train(small_adv.copy(), _images(2), np.array([[0.5, 0.6, 0, 0, 0]] * 2), OptimizerConfig())


def test_soft_label_training_path():
    X, y = _toy_separable()
    soft = np.where(np.eye(2)[y] > 0, 0.9, 0.1)
    est = AdversarialCNN(width=0.25, epochs=1, batch_size=2, random_state=0).fit(X, soft)
    assert est.classes_.tolist() == [0, 1]
    assert est.score(X, y) > 0.9


# --------------------------------------------------------------------------
# input gradients and Jacobian


@pytest.mark.parametrize("which", ["adv", "deep"])
def test_gradient_wrt_input_finite_differences(which, small_adv, small_deep):
    state = small_adv if which == "adv" else small_deep
    rng = np.random.default_rng(0)
    x = rng.uniform(0.05, 0.95, (32, 32, 3))
    label = 2
    g = gradient_wrt_input(state, x, label)
    idx = rng.choice(x.size, 50, replace=False)

    def loss(v):
        p = predict_proba(state, v)
        return -np.log(p[0, label])

    num = numeric_grad(loss, x, h=1e-5, idx=idx)
    assert rel_error(g.reshape(-1)[idx], num.reshape(-1)[idx]) < 1e-4
    d = rng.normal(size=x.shape)
    # a small step keeps the whole-image probe clear of ReLU and max-pool kinks
    directional = (loss(x + 1e-6 * d) - loss(x - 1e-6 * d)) / 2e-6
    assert abs((g * d).sum() - directional) / abs(directional) < 1e-4


def test_gradient_zero_when_all_relus_dead(small_adv):
    state = small_adv.copy()
    state.weights["0.bias"][:] = -1e6
    g = gradient_wrt_input(state, _images(1)[0], 1)
    assert not g.any()


def test_gradient_is_deterministic(small_deep):
    x = _images(1)[0]
    np.testing.assert_array_equal(gradient_wrt_input(small_deep, x, 0), gradient_wrt_input(small_deep, x, 0))


def test_jacobian_rows_equal_single_class_backward(small_deep):
    x = _images(1, seed=3)[0]
    J = jacobian_wrt_input(small_deep, x)
    assert J.shape == (5, 3072)
    for c in range(5):
        net = Network(small_deep)
        net.forward(x[None], stop=net.logit_index)
        row = net.backward(np.eye(5)[c][None], start=net.logit_index)
        np.testing.assert_allclose(J[c], row.reshape(-1), rtol=1e-10, atol=1e-15)


def test_jacobian_of_linear_model_is_weight_matrix():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(3072, 4))
    state = ModelState("linear", [LayerSpec("Flatten"), LayerSpec("Dense", units=4)],
                       {"1.weight": W, "1.bias": np.zeros(4)}, num_classes=4)
    np.testing.assert_allclose(jacobian_wrt_input(state, _images(1)[0]), W.T, atol=1e-14)


def test_jacobian_spot_checks(small_adv):
    rng = np.random.default_rng(1)
    x = rng.uniform(0.05, 0.95, (32, 32, 3))
    J = jacobian_wrt_input(small_adv, x)
    idx = rng.choice(3072, 30, replace=False)
    for c in (0, 3):
        num = numeric_grad(lambda v: forward_logits(small_adv, v)[0, c], x, idx=idx).reshape(-1)
        assert rel_error(J[c, idx], num[idx]) < 1e-4


# --------------------------------------------------------------------------
# serialization


def test_save_load_save_identical_bytes(tmp_path, small_deep):
    p1, p2 = tmp_path / "a.sfm", tmp_path / "b.sfm"
    h1 = save_model(small_deep, p1)
    h2 = save_model(load_model(p1), p2)
    assert h1 == h2 and p1.read_bytes() == p2.read_bytes()
    back = load_model(p1)
    assert back.temperature == small_deep.temperature
    assert all(np.array_equal(back.weights[k], small_deep.weights[k]) for k in small_deep.weights)


def test_file_header_fields(small_adv):
    data = dump_model_bytes(small_adv)
    assert data[:8] == MAGIC
    assert int.from_bytes(data[8:10], "little") == FORMAT_VERSION
    assert b"AdversarialCNN" in data[:40]


def test_bad_magic_and_version(small_adv):
    data = bytearray(dump_model_bytes(small_adv))
    bad = bytearray(data)
    bad[0] ^= 0xFF
    with pytest.raises(BadMagicError):
        load_model_bytes(bytes(bad))
    bad = bytearray(data)
    bad[8] = 7
    with pytest.raises(VersionMismatchError):
        load_model_bytes(bytes(bad))


def test_truncated_file(small_adv):
    data = dump_model_bytes(small_adv)
    for cut in (5, 12, 40, len(data) - 1):
        with pytest.raises(TruncatedFileError):
            load_model_bytes(data[:cut])


def test_weight_shape_mismatch(small_adv):
    state = small_adv.copy()
    state.weights["7.weight"] = state.weights["7.weight"][:-1]
    with pytest.raises(ArchitectureMismatchError):
        load_model_bytes(dump_model_bytes(state))


def test_load_validates_deep_flatten_width():
    state = build_deep_cnn(43, 1.0, 0)
    narrow = state.copy()
    narrow.weights["12.weight"] = np.zeros((4096, 256))
    with pytest.raises(ArchitectureMismatchError, match="16384"):
        load_model_bytes(dump_model_bytes(narrow))
    pooled = state.copy()
    pooled.layers = pooled.layers[:11] + [LayerSpec("MaxPool2D", pool=(2, 2), stride=(2, 2))] + pooled.layers[11:]
    shift = {}
    for name, w in state.weights.items():
        i, kind = name.split(".")
        shift[f"{int(i) + (int(i) >= 11)}.{kind}"] = w
    pooled.weights = shift
    with pytest.raises(ArchitectureMismatchError):
        load_model_bytes(dump_model_bytes(pooled))


@given(st.integers(0, 200), st.integers(1, 255))
def test_single_byte_header_corruption_never_crashes(pos, flip):
    data = bytearray(_CORRUPTION_BASE)
    data[pos] ^= flip
    try:
        load_model_bytes(bytes(data))
    except ModelFormatError as exc:
        if pos < 8:
            assert isinstance(exc, BadMagicError)
        elif pos < 10:
            assert isinstance(exc, VersionMismatchError)


_CORRUPTION_BASE = dump_model_bytes(build_adversarial_cnn(3, 0, width=0.05))


# --------------------------------------------------------------------------
# estimator API


def test_estimator_params_and_clone():
    est = DeepCNN(temperature=20.0, width=0.5, epochs=3)
    params = est.get_params()
    assert params["temperature"] == 20.0 and params["width"] == 0.5 and params["epochs"] == 3
    twin = clone(est)
    assert twin.get_params() == params and twin is not est


def test_unfitted_estimator_raises():
    with pytest.raises(NotFittedError):
        AdversarialCNN().predict(_images(1))


def test_estimator_save_and_reload(tmp_path):
    X, y = _toy_separable()
    est = AdversarialCNN(width=0.25, epochs=1, batch_size=2, random_state=0).fit(X, y)
    est.save(tmp_path / "m.sfm")
    again = load_estimator(tmp_path / "m.sfm")
    np.testing.assert_array_equal(again.predict(X), est.predict(X))
    assert isinstance(estimator_for(build_deep_cnn(3, 5.0, 0, width=0.25)), DeepCNN)


def test_warm_start_continues_from_state():
    X, y = _toy_separable()
    est = AdversarialCNN(width=0.25, epochs=1, batch_size=2, random_state=0).fit(X, y)
    before = est.state_.copy()
    est.set_params(warm_start=True, learning_rate=0.0).fit(X, y)
    assert all(np.array_equal(before.weights[k], est.state_.weights[k]) for k in before.weights)
