"""The two fixed classifier architectures and their estimator wrappers.

``AdversarialCNN`` is the shallow substitute used for crafting; ``DeepCNN`` is
the victim, which carries a temperature layer ahead of the softmax head.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .numcore import (
    DimensionError,
    Layer,
    LayerSpec,
    OptimizerConfig,
    ParameterError,
    SGD,
    cross_entropy_loss,
    layer_output_shape,
    param_shapes,
    temperature_softmax,
)

logger = logging.getLogger(__name__)

INPUT_SHAPE = (32, 32, 3)
ARCHITECTURES = ("AdversarialCNN", "DeepCNN")


# --------------------------------------------------------------------------
# architectures


def _w(n, width):
    return max(1, int(round(n * width)))


def adversarial_cnn_layers(num_classes, width=1.0):
    return [
        LayerSpec("Conv2D", kernel=(8, 8), filters=_w(64, width), stride=(2, 2), padding="same"),
        LayerSpec("ReLU"),
        LayerSpec("Conv2D", kernel=(6, 6), filters=_w(128, width), stride=(2, 2), padding="valid"),
        LayerSpec("ReLU"),
        LayerSpec("Conv2D", kernel=(5, 5), filters=_w(128, width), stride=(1, 1), padding="valid"),
        LayerSpec("ReLU"),
        LayerSpec("Flatten"),
        LayerSpec("Dense", units=_w(1024, width)),
        LayerSpec("ReLU"),
        LayerSpec("Dense", units=num_classes),
    ]


def deep_cnn_layers(num_classes, temperature=1.0, width=1.0, relu_logits=True):
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    layers = [
        LayerSpec("Conv2D", kernel=(3, 3), filters=_w(32, width), padding="same"),
        LayerSpec("ReLU"),
        LayerSpec("Conv2D", kernel=(3, 3), filters=_w(32, width), padding="same"),
        LayerSpec("ReLU"),
        LayerSpec("MaxPool2D", pool=(2, 2), stride=(2, 2)),
        LayerSpec("Dropout", p=0.25),
        LayerSpec("Conv2D", kernel=(3, 3), filters=_w(64, width), padding="same"),
        LayerSpec("ReLU"),
        LayerSpec("Conv2D", kernel=(3, 3), filters=_w(64, width), padding="same"),
        LayerSpec("ReLU"),
        LayerSpec("Dropout", p=0.25),
        LayerSpec("Flatten"),
        LayerSpec("Dense", units=_w(256, width)),
        LayerSpec("Dropout", p=0.5),
        LayerSpec("Dense", units=num_classes),
    ]
    if relu_logits:
        layers.append(LayerSpec("ReLU"))
    layers.append(LayerSpec("TemperatureScale", temperature=float(temperature)))
    return layers


def expected_layers(architecture_id, num_classes, temperature=1.0, width=1.0, relu_logits=True):
    if architecture_id == "AdversarialCNN":
        return adversarial_cnn_layers(num_classes, width)
    if architecture_id == "DeepCNN":
        return deep_cnn_layers(num_classes, temperature, width, relu_logits)
    raise ParameterError(f"unknown architecture {architecture_id!r}")


def shape_trace(layers, input_shape=INPUT_SHAPE):
    """Output shape after every layer, in order."""
    shapes, shape = [], tuple(input_shape)
    for spec in layers:
        shape = layer_output_shape(spec, shape)
        shapes.append(shape)
    return shapes


# --------------------------------------------------------------------------
# model state


@dataclass
class ModelState:
    architecture_id: str
    layers: list
    weights: dict
    temperature: float = 1.0
    num_classes: int = 43
    width: float = 1.0
    relu_logits: bool = True
    training_manifest: dict = field(default_factory=dict)

    def param_names(self):
        """Weight names in layer order."""
        names, shape = [], INPUT_SHAPE
        for i, spec in enumerate(self.layers):
            names.extend(f"{i}.{k}" for k in param_shapes(spec, shape))
            shape = layer_output_shape(spec, shape)
        return names

    def expected_weight_shapes(self):
        out, shape = {}, INPUT_SHAPE
        for i, spec in enumerate(self.layers):
            for k, s in param_shapes(spec, shape).items():
                out[f"{i}.{k}"] = s
            shape = layer_output_shape(spec, shape)
        return out

    def flatten_width(self):
        trace = shape_trace(self.layers)
        return next(trace[i][0] for i, s in enumerate(self.layers) if s.kind == "Flatten")

    def validate(self):
        want = expected_layers(self.architecture_id, self.num_classes, self.temperature, self.width, self.relu_logits)
        if list(self.layers) != want:
            raise ArchitectureMismatchError(f"layer sequence does not match the {self.architecture_id} table")
        shapes = self.expected_weight_shapes()
        if set(shapes) != set(self.weights):
            raise ArchitectureMismatchError(f"weight names {sorted(self.weights)} != expected {sorted(shapes)}")
        for name, s in shapes.items():
            if self.weights[name].shape != tuple(s):
                raise ArchitectureMismatchError(f"weight {name} has shape {self.weights[name].shape}, expected {s}")
        return self

    def copy(self):
        return ModelState(
            self.architecture_id, list(self.layers), {k: v.copy() for k, v in self.weights.items()},
            self.temperature, self.num_classes, self.width, self.relu_logits, json.loads(json.dumps(self.training_manifest)),
        )

    def with_temperature(self, temperature):
        """Same weights, different temperature layer (DeepCNN only)."""
        if self.architecture_id != "DeepCNN":
            raise ParameterError("only DeepCNN carries a temperature layer")
        state = self.copy()
        state.temperature = float(temperature)
        state.layers = expected_layers("DeepCNN", self.num_classes, temperature, self.width, self.relu_logits)
        return state

    def fingerprint(self):
        return hashlib.sha256(dump_model_bytes(self)).hexdigest()


def _he_uniform(rng, shape):
    fan_in = int(np.prod(shape[:-1]))
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def _init_weights(layers, seed):
    rng = np.random.default_rng(seed)
    weights, shape = {}, INPUT_SHAPE
    for i, spec in enumerate(layers):
        for k, s in param_shapes(spec, shape).items():
            weights[f"{i}.{k}"] = np.zeros(s) if k == "bias" else _he_uniform(rng, s)
        shape = layer_output_shape(spec, shape)
    return weights


def build_adversarial_cnn(num_classes=43, seed=0, width=1.0):
    if num_classes < 2:
        raise ParameterError("num_classes must be >= 2")
    layers = adversarial_cnn_layers(num_classes, width)
    return ModelState("AdversarialCNN", layers, _init_weights(layers, seed), 1.0, num_classes, width, False,
                      {"init_seed": int(seed)})


def build_deep_cnn(num_classes=43, T=1.0, seed=0, width=1.0, relu_logits=True):
    if num_classes < 2:
        raise ParameterError("num_classes must be >= 2")
    layers = deep_cnn_layers(num_classes, T, width, relu_logits)
    return ModelState("DeepCNN", layers, _init_weights(layers, seed), float(T), num_classes, width, relu_logits,
                      {"init_seed": int(seed)})


# --------------------------------------------------------------------------
# forward / backward over a state


class Network:
    """Runtime view over a :class:`ModelState`; parameters are shared, not copied."""

    def __init__(self, state):
        self.state = state
        self.layers = []
        for i, spec in enumerate(state.layers):
            params = {k.split(".", 1)[1]: v for k, v in state.weights.items() if k.split(".", 1)[0] == str(i)}
            self.layers.append(Layer(spec, params))
        self.logit_index = len(self.layers) - (1 if state.layers[-1].kind == "TemperatureScale" else 0)

    def forward(self, x, training=False, rng=None, stop=None, temperature=None):
        out = np.asarray(x, dtype=np.float64)
        stop = len(self.layers) if stop is None else stop
        for layer in self.layers[:stop]:
            if layer.spec.kind == "TemperatureScale":
                layer._cache = layer.spec.temperature if temperature is None else temperature
                out = out / layer._cache
            else:
                out = layer.forward(out, training=training, rng=rng)
        return out

    def backward(self, grad, start=None):
        start = len(self.layers) if start is None else start
        for layer in reversed(self.layers[:start]):
            if layer.spec.kind == "TemperatureScale":
                grad = grad / layer._cache
            else:
                grad = layer.backward(grad)
        return grad

    def param_grads(self):
        grads = {}
        for i, layer in enumerate(self.layers):
            for k, g in layer.grads.items():
                grads[f"{i}.{k}"] = g
        return grads


def _check_images(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.shape[1:] != INPUT_SHAPE:
        raise DimensionError(f"expected images of shape {INPUT_SHAPE}, got {X.shape[1:]}", axis="image")
    return X


def _batches(n, batch_size):
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))


def forward_logits(state, X, batch_size=256):
    """Pre-temperature logits ``Z(X)``, shape ``(n, num_classes)``."""
    X = _check_images(X)
    net = Network(state)
    return np.concatenate([net.forward(X[b], stop=net.logit_index) for b in _batches(len(X), batch_size)])


def predict_proba(state, X, temperature=None, batch_size=256):
    T = state.temperature if temperature is None else temperature
    return temperature_softmax(forward_logits(state, X, batch_size), T)


def _soft_targets(y, num_classes):
    y = np.asarray(y)
    if y.ndim == 1:
        if y.min() < 0 or y.max() >= num_classes:
            raise ValueError(f"labels must lie in [0, {num_classes})")
        return np.eye(num_classes)[y.astype(int)]
    if y.ndim != 2 or y.shape[1] != num_classes:
        raise DimensionError(f"soft labels must have shape (n, {num_classes}), got {y.shape}", axis=1)
    if not np.allclose(y.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("soft label rows must sum to 1")
    return y.astype(np.float64)


def loss_and_input_gradient(state, X, y, temperature=None):
    """Per-sample cross-entropy and its gradient with respect to each input image."""
    X = _check_images(X)
    Y = _soft_targets(y, state.num_classes)
    net = Network(state)
    out = net.forward(X, temperature=temperature)
    probs = temperature_softmax(out, 1.0)
    loss = cross_entropy_loss(probs, Y)
    grad = net.backward(probs - Y)
    return loss, grad


def gradient_wrt_input(state, image, label, temperature=None):
    """``dJ/dx`` of the cross-entropy at ``label``; batch or single image."""
    single = np.ndim(image) == 3
    _, grad = loss_and_input_gradient(state, image, np.atleast_1d(label) if single else label, temperature)
    return grad[0] if single else grad


def jacobian_wrt_input(state, image):
    """Jacobian of the pre-temperature logits, shape ``(num_classes, 32*32*3)``."""
    n = state.num_classes
    X = np.repeat(_check_images(image), n, axis=0)
    net = Network(state)
    net.forward(X, stop=net.logit_index)
    grad = net.backward(np.eye(n), start=net.logit_index)
    return grad.reshape(n, -1)


def dataset_hash(X, y):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(X, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(y, dtype=np.float64).tobytes())
    return h.hexdigest()


def train(state, X, y, config, loss_scale=1.0, monitor_size=512):
    """Minibatch SGD on cross-entropy at the state's temperature.

    ``y`` holds integer labels or soft-label rows. Returns ``(state, curve)``
    where ``curve`` has one ``(train_mode_loss, eval_loss)`` row per epoch; the
    eval loss is measured with dropout off on a fixed subset of ``X``.
    ``state`` is updated in place.
    """
    X = _check_images(X)
    if len(X) == 0:
        raise ValueError("cannot train on an empty dataset")
    Y = _soft_targets(y, state.num_classes)
    if len(Y) != len(X):
        raise DimensionError(f"{len(X)} images but {len(Y)} label rows", axis=0)
    seq = np.random.SeedSequence(config.rng_seed)
    shuffle_rng, dropout_rng, monitor_rng = (np.random.default_rng(s) for s in seq.spawn(3))
    monitor = np.sort(monitor_rng.permutation(len(X))[:monitor_size])
    net = Network(state)
    opt = SGD.from_config(config)
    curve = []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(X))
        total = 0.0
        for b in _batches(len(X), config.batch_size):
            idx = order[b]
            out = net.forward(X[idx], training=True, rng=dropout_rng)
            probs = temperature_softmax(out, 1.0)
            batch_loss = cross_entropy_loss(probs, Y[idx]).sum()
            if not np.isfinite(batch_loss):
                raise FloatingPointError(f"training diverged in epoch {epoch + 1} (non-finite loss)")
            total += batch_loss
            net.backward((probs - Y[idx]) * (loss_scale / len(idx)))
            opt.step(state.weights, net.param_grads())
        eval_loss = cross_entropy_loss(predict_proba(state, X[monitor]), Y[monitor]).mean()
        curve.append((total / len(X), float(eval_loss)))
        logger.info("%s epoch %d/%d loss %.5f eval %.5f", state.architecture_id, epoch + 1, config.epochs,
                    curve[-1][0], curve[-1][1])
    manifest = state.training_manifest
    manifest.setdefault("history", []).append({
        "dataset_hash": dataset_hash(X, Y),
        "samples": int(len(X)),
        "epochs": int(config.epochs),
        "seed": int(config.rng_seed),
        "optimizer": asdict(config),
        "loss_scale": float(loss_scale),
        "temperature": float(state.temperature),
    })
    return state, np.asarray(curve)


# --------------------------------------------------------------------------
# serialization

MAGIC = b"SFMODEL\x00"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """Base class for model-file load failures."""


class BadMagicError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class TruncatedFileError(ModelFormatError):
    pass


class ArchitectureMismatchError(ModelFormatError):
    pass


def _field(buf, data):
    buf.write(struct.pack("<I", len(data)))
    buf.write(data)


def dump_model_bytes(state):
    layout = {
        "num_classes": state.num_classes,
        "width": state.width,
        "relu_logits": state.relu_logits,
        "layers": [s.to_dict() for s in state.layers],
        "weights": [[name, list(state.weights[name].shape)] for name in state.param_names()],
    }
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", FORMAT_VERSION))
    _field(buf, state.architecture_id.encode())
    buf.write(struct.pack("<d", state.temperature))
    _field(buf, json.dumps(state.training_manifest, sort_keys=True).encode())
    _field(buf, json.dumps(layout, sort_keys=True).encode())
    for name in state.param_names():
        buf.write(np.ascontiguousarray(state.weights[name], dtype="<f8").tobytes())
    return buf.getvalue()


def _read(view, pos, n):
    if pos + n > len(view):
        raise TruncatedFileError(f"file truncated at byte {pos}: needed {n} more bytes")
    return view[pos:pos + n], pos + n


def _read_field(view, pos):
    raw, pos = _read(view, pos, 4)
    return _read(view, pos, struct.unpack("<I", raw)[0])


def load_model_bytes(data):
    view = memoryview(data)
    magic, pos = _read(view, 0, len(MAGIC))
    if bytes(magic) != MAGIC:
        raise BadMagicError("not a model file (bad magic bytes)")
    raw, pos = _read(view, pos, 2)
    version = struct.unpack("<H", raw)[0]
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"model format version {version}, expected {FORMAT_VERSION}")
    try:
        arch, pos = _read_field(view, pos)
        raw, pos = _read(view, pos, 8)
        temperature = struct.unpack("<d", raw)[0]
        manifest, pos = _read_field(view, pos)
        layout, pos = _read_field(view, pos)
        arch = bytes(arch).decode()
        manifest = json.loads(bytes(manifest))
        layout = json.loads(bytes(layout))
        layers = [LayerSpec.from_dict(d) for d in layout["layers"]]
    except TruncatedFileError:
        raise
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"corrupt model header: {exc}") from exc
    if arch not in ARCHITECTURES:
        raise ArchitectureMismatchError(f"unknown architecture id {arch!r}")
    weights = {}
    try:
        for name, shape in layout["weights"]:
            shape = tuple(int(d) for d in shape)
            raw, pos = _read(view, pos, int(np.prod(shape)) * 8)
            weights[str(name)] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        num_classes, width, relu_logits = int(layout["num_classes"]), float(layout["width"]), bool(layout["relu_logits"])
    except TruncatedFileError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"corrupt weight layout: {exc}") from exc
    if pos != len(view):
        raise ModelFormatError(f"{len(view) - pos} trailing bytes after weights")
    state = ModelState(arch, layers, weights, temperature, num_classes, width, relu_logits, manifest)
    try:
        return state.validate()
    except (ParameterError, DimensionError) as exc:
        raise ArchitectureMismatchError(str(exc)) from exc


def save_model(state, path):
    data = dump_model_bytes(state)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load_model(path):
    with open(path, "rb") as fh:
        return load_model_bytes(fh.read())


# --------------------------------------------------------------------------
# estimators


class _ConvNetClassifier(ClassifierMixin, BaseEstimator):
    """Shared fit/predict plumbing; subclasses define ``_build``."""

    def _optimizer_config(self, seed):
        return OptimizerConfig(self.learning_rate, self.momentum, self.decay, self.epochs, self.batch_size, seed)

    def _loss_scale(self, state):
        return 1.0

    def fit(self, X, y):
        """Train from scratch (or from ``state_`` when ``warm_start``).

        ``y`` may be integer labels or an ``(n, n_classes)`` soft-label matrix.
        """
        X = _check_images(X)
        y = np.asarray(y)
        if len(X) == 0:
            raise ValueError("cannot fit on an empty dataset")
        if y.ndim == 2:
            n_classes = y.shape[1]
        else:
            y = y.astype(int)
            n_classes = self.n_classes or int(y.max()) + 1
        init_seed, train_seed = np.random.SeedSequence(self.random_state).generate_state(2)
        if self.warm_start and hasattr(self, "state_"):
            state = self.state_
        else:
            state = self._build(n_classes, int(init_seed))
        config = self._optimizer_config(int(train_seed))
        state, curve = train(state, X, y, config, loss_scale=self._loss_scale(state))
        self.state_ = state
        self.loss_curve_ = curve
        self.classes_ = np.arange(n_classes)
        return self

    @classmethod
    def from_state(cls, state, **params):
        est = cls(**params)
        est.state_ = state
        est.classes_ = np.arange(state.num_classes)
        return est

    def decision_function(self, X):
        check_is_fitted(self, "state_")
        return forward_logits(self.state_, X)

    def predict_proba(self, X, temperature=None):
        check_is_fitted(self, "state_")
        return predict_proba(self.state_, X, temperature)

    def predict(self, X):
        return self.decision_function(X).argmax(axis=1)

    def gradient_wrt_input(self, X, y):
        check_is_fitted(self, "state_")
        return gradient_wrt_input(self.state_, X, y)

    def jacobian_wrt_input(self, image):
        check_is_fitted(self, "state_")
        return jacobian_wrt_input(self.state_, image)

    def save(self, path):
        check_is_fitted(self, "state_")
        return save_model(self.state_, path)


class AdversarialCNN(_ConvNetClassifier):
    """Shallow three-conv substitute network used to craft adversarial examples.

    ``width`` scales every filter and node count; ``width=1`` is the full-size
    network, smaller values give the reduced variant used on small data.
    """

    def __init__(self, n_classes=None, width=1.0, learning_rate=0.01, momentum=0.9, decay=1e-6,
                 epochs=30, batch_size=64, random_state=0, warm_start=False):
        self.n_classes = n_classes
        self.width = width
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.decay = decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state
        self.warm_start = warm_start

    def _build(self, n_classes, seed):
        return build_adversarial_cnn(n_classes, seed, self.width)


class DeepCNN(_ConvNetClassifier):
    """Four-conv victim network with a temperature layer before the softmax.

    With ``temperature_grad_scale`` the loss gradient is multiplied by ``T``.
    Off by default: at high ``T`` the scaled gradient never saturates and
    training diverges.
    """

    def __init__(self, n_classes=None, temperature=1.0, width=1.0, relu_logits=True, learning_rate=0.01,
                 momentum=0.9, decay=1e-6, epochs=30, batch_size=64, random_state=0, warm_start=False,
                 temperature_grad_scale=False):
        self.n_classes = n_classes
        self.temperature = temperature
        self.width = width
        self.relu_logits = relu_logits
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.decay = decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state
        self.warm_start = warm_start
        self.temperature_grad_scale = temperature_grad_scale

    def _build(self, n_classes, seed):
        return build_deep_cnn(n_classes, self.temperature, seed, self.width, self.relu_logits)

    def _loss_scale(self, state):
        return state.temperature if self.temperature_grad_scale else 1.0


def estimator_for(state, **params):
    cls = AdversarialCNN if state.architecture_id == "AdversarialCNN" else DeepCNN
    if cls is DeepCNN:
        params.setdefault("temperature", state.temperature)
        params.setdefault("relu_logits", state.relu_logits)
    params.setdefault("width", state.width)
    return cls.from_state(state, **params)


def load_estimator(path, **params):
    return estimator_for(load_model(path), **params)
