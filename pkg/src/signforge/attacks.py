"""Adversarial example crafting: FGSM (untargeted) and JSMA (targeted)."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .dataio import Dataset, LabeledImage
from .models import ModelState, forward_logits, gradient_wrt_input, jacobian_wrt_input
from .numcore import temperature_softmax

logger = logging.getLogger(__name__)

NUM_PIXELS = 32 * 32


def _state(model):
    if isinstance(model, ModelState):
        return model
    state = getattr(model, "state_", None)
    if state is None:
        raise TypeError(f"expected a ModelState or fitted estimator, got {type(model).__name__}")
    return state


@dataclass
class FgsmConfig:
    epsilon: float = 0.1
    clip: bool = True

    def __post_init__(self):
        if not 0 < self.epsilon <= 1:
            raise ValueError(f"epsilon must lie in (0, 1], got {self.epsilon}")


@dataclass
class JsmaConfig:
    target_class: int = 0
    theta: float = 1.0
    max_distortion_pct: float = 5.0
    pair_search: bool = True

    def __post_init__(self):
        if not 0 < self.max_distortion_pct <= 100:
            raise ValueError("max_distortion_pct must lie in (0, 100]")
        if self.theta == 0:
            raise ValueError("theta must be nonzero")


@dataclass
class Prediction:
    probs: np.ndarray
    logits: np.ndarray
    top_k: list

    @classmethod
    def from_logits(cls, logits, temperature=1.0, k=3):
        probs = temperature_softmax(logits, temperature)
        order = np.argsort(-probs, kind="stable")[:k]
        return cls(probs, np.asarray(logits), [(int(c), float(probs[c])) for c in order])

    @property
    def label(self):
        return self.top_k[0][0]


def distortion_pct(original, perturbed):
    """Percent of spatial pixels with any channel changed."""
    changed = np.any(np.asarray(original) != np.asarray(perturbed), axis=-1)
    return 100.0 * changed.reshape(changed.shape[0], -1).sum(axis=1) / NUM_PIXELS if changed.ndim == 3 \
        else 100.0 * changed.sum() / NUM_PIXELS


def linf_norm(original, perturbed):
    diff = np.abs(np.asarray(perturbed) - np.asarray(original))
    return diff.reshape(diff.shape[0], -1).max(axis=1) if diff.ndim == 4 else float(diff.max())


@dataclass
class AdversarialExample:
    original: LabeledImage
    perturbed: np.ndarray
    method: str
    params: dict
    substitute_prediction: Prediction
    success_on_substitute: bool
    distortion_pct: float
    linf_norm: float
    iterations: int = 0


# --------------------------------------------------------------------------
# FGSM


def gradient_sign_map(model, X, y):
    """Elementwise sign of the loss gradient, in {-1, 0, +1}."""
    return np.sign(gradient_wrt_input(_state(model), X, y))


def fgsm_from_sign(X, sign_map, epsilon, clip=True):
    adv = np.asarray(X) + epsilon * sign_map
    return np.clip(adv, 0.0, 1.0) if clip else adv


def fgsm(model, sample, config):
    """Untargeted fast gradient sign step on one :class:`LabeledImage`."""
    state = _state(model)
    sign = gradient_sign_map(state, sample.pixels, sample.label)
    adv = fgsm_from_sign(sample.pixels, sign, config.epsilon, config.clip)
    pred = Prediction.from_logits(forward_logits(state, adv)[0], state.temperature)
    return AdversarialExample(
        sample, adv, "FGSM", asdict(config), pred, pred.label != sample.label,
        float(distortion_pct(sample.pixels, adv)), float(linf_norm(sample.pixels, adv)),
    )


def epsilon_grid(eps_from=0.01, eps_to=0.30, step=0.01):
    n = int(round((eps_to - eps_from) / step)) + 1
    return np.round(eps_from + step * np.arange(n), 10)


@dataclass
class SweepTable:
    rows: list  # (epsilon, accuracy, mean_linf)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epsilon", "accuracy", "mean_linf"])
        for eps, acc, linf in self.rows:
            w.writerow([f"{eps:.4f}", f"{acc:.6f}", f"{linf:.6f}"])
        return buf.getvalue()

    @property
    def epsilons(self):
        return np.array([r[0] for r in self.rows])

    @property
    def accuracies(self):
        return np.array([r[1] for r in self.rows])


def epsilon_sweep(model, dataset, eps_from=0.01, eps_to=0.30, step=0.01, baseline=True, batch_size=256):
    """Accuracy of ``model`` on FGSM examples over a grid of epsilons.

    One sign map per image is computed and reused at every epsilon. With
    ``baseline`` an epsilon=0 row (clean accuracy) is prepended.
    """
    if len(dataset) == 0:
        raise ValueError("epsilon sweep needs a nonempty dataset")
    state = _state(model)
    signs = np.concatenate([gradient_sign_map(state, dataset.X[b], dataset.y[b])
                            for b in _chunks(len(dataset), batch_size)])
    rows = []
    if baseline:
        acc = float((forward_logits(state, dataset.X).argmax(1) == dataset.y).mean())
        rows.append((0.0, acc, 0.0))
    for eps in epsilon_grid(eps_from, eps_to, step):
        adv = fgsm_from_sign(dataset.X, signs, eps)
        acc = float((forward_logits(state, adv).argmax(1) == dataset.y).mean())
        rows.append((float(eps), acc, float(linf_norm(dataset.X, adv).mean())))
    return SweepTable(rows)


def _chunks(n, size):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


# --------------------------------------------------------------------------
# JSMA


def _pixel_jacobian(state, x):
    # channels of a pixel move together, so their derivatives add
    return jacobian_wrt_input(state, x).reshape(state.num_classes, NUM_PIXELS, 3).sum(axis=2)


def _select(alpha, beta, domain, pair_search):
    """Best saliency feature(s) or ``None``. ``alpha``/``beta`` already sign-adjusted."""
    idx = np.flatnonzero(domain)
    if pair_search:
        if len(idx) < 2:
            return None
        a, b = alpha[idx], beta[idx]
        A = a[:, None] + a[None, :]
        B = b[:, None] + b[None, :]
        score = np.where((A > 0) & (B < 0), A * -B, 0.0)
        np.fill_diagonal(score, 0.0)
        best = int(np.argmax(score))
        if score.flat[best] <= 0:
            return None
        i, j = divmod(best, len(idx))
        return [int(idx[i]), int(idx[j])]
    a, b = alpha[idx], beta[idx]
    score = np.where((a > 0) & (b < 0), a * -b, 0.0)
    best = int(np.argmax(score)) if len(idx) else 0
    if not len(idx) or score[best] <= 0:
        return None
    return [int(idx[best])]


def jsma(model, sample, config):
    """Targeted saliency-map attack toward ``config.target_class``.

    Each iteration saturates one pixel pair (all three channels) by ``theta``.
    Stops on reaching the target, when the distortion budget cannot absorb
    another step, or when no pixel pair has positive saliency.
    """
    state = _state(model)
    x = np.array(sample.pixels, dtype=np.float64)
    target = int(config.target_class)
    sgn = 1.0 if config.theta > 0 else -1.0
    per_step = 2 if config.pair_search else 1
    budget = int(np.floor(config.max_distortion_pct / 100.0 * NUM_PIXELS + 1e-9))
    used = np.zeros(NUM_PIXELS, dtype=bool)
    logits = forward_logits(state, x)[0]
    iterations = 0
    while logits.argmax() != target:
        if used.sum() + per_step > budget:
            break
        flat = x.reshape(NUM_PIXELS, 3)
        movable = np.any(flat < 1.0, axis=1) if sgn > 0 else np.any(flat > 0.0, axis=1)
        J = _pixel_jacobian(state, x)
        alpha = sgn * J[target]
        beta = sgn * (J.sum(axis=0) - J[target])
        chosen = _select(alpha, beta, movable & ~used, config.pair_search)
        if chosen is None:
            break
        flat[chosen] = np.clip(flat[chosen] + config.theta, 0.0, 1.0)
        used[chosen] = True
        iterations += 1
        logits = forward_logits(state, x)[0]
    pred = Prediction.from_logits(logits, state.temperature)
    success = pred.label == target
    return AdversarialExample(
        sample, x, "JSMA", asdict(config), pred, success,
        float(distortion_pct(sample.pixels, x)), float(linf_norm(sample.pixels, x)), iterations,
    )


@dataclass
class JsmaMatrix:
    num_classes: int
    rows: list  # (source, target, success, distortion_pct, iterations)
    examples: list = field(default_factory=list, repr=False)

    @property
    def success_matrix(self):
        m = np.zeros((self.num_classes, self.num_classes), dtype=bool)
        for s, t, ok, _, _ in self.rows:
            m[s, t] = ok
        return m

    @property
    def attempts(self):
        return len(self.rows)

    @property
    def success_rate(self):
        return float(np.mean([r[2] for r in self.rows])) if self.rows else 0.0

    @property
    def mean_distortion(self):
        d = [r[3] for r in self.rows if r[2]]
        return float(np.mean(d)) if d else float("nan")

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source", "target", "success", "distortion_pct", "iterations"])
        for s, t, ok, d, it in self.rows:
            w.writerow([s, t, int(ok), f"{d:.4f}", it])
        return buf.getvalue()


def jsma_matrix(model, samples, theta=1.0, max_distortion_pct=5.0, pair_search=True):
    """Attack every (source, target != source) pair; ``samples[c]`` is the source of class ``c``."""
    samples = list(samples)
    labels = [s.label for s in samples]
    if sorted(labels) != list(range(len(samples))):
        raise ValueError("jsma_matrix needs exactly one source sample per class")
    n = len(samples)
    rows, examples = [], []
    for sample in sorted(samples, key=lambda s: s.label):
        for target in range(n):
            if target == sample.label:
                continue
            ex = jsma(model, sample, JsmaConfig(target, theta, max_distortion_pct, pair_search))
            rows.append((sample.label, target, ex.success_on_substitute, ex.distortion_pct, ex.iterations))
            examples.append(ex)
    return JsmaMatrix(n, rows, examples)


# --------------------------------------------------------------------------
# adversarial sets


@dataclass
class AdversarialSet:
    """Batch of crafted images, each tied to its original sample's id and true label."""

    X: np.ndarray
    y: np.ndarray
    source_ids: list
    methods: list
    params: list
    success: np.ndarray
    distortion: np.ndarray
    linf: np.ndarray
    num_classes: int
    crafted_on: str = ""
    split: str = "test"

    def __len__(self):
        return len(self.y)

    def to_dataset(self):
        return Dataset(self.X, self.y, self.num_classes, self.split,
                       np.array(["augmented"] * len(self.y), dtype=object),
                       [f"{sid}#{m.lower()}{i}" for i, (sid, m) in enumerate(zip(self.source_ids, self.methods))])

    def concat(self, other):
        return AdversarialSet(
            np.concatenate([self.X, other.X]), np.concatenate([self.y, other.y]),
            self.source_ids + other.source_ids, self.methods + other.methods, self.params + other.params,
            np.concatenate([self.success, other.success]), np.concatenate([self.distortion, other.distortion]),
            np.concatenate([self.linf, other.linf]), self.num_classes, self.crafted_on, self.split,
        )

    def summary_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source_id", "method", "label", "success", "distortion_pct", "linf"])
        for i in range(len(self)):
            w.writerow([self.source_ids[i], self.methods[i], int(self.y[i]), int(self.success[i]),
                        f"{self.distortion[i]:.4f}", f"{self.linf[i]:.6f}"])
        return buf.getvalue()


def fgsm_set(model, dataset, epsilon=0.1, clip=True, batch_size=256):
    """FGSM examples for every sample of ``dataset``."""
    state = _state(model)
    FgsmConfig(epsilon, clip)
    parts = []
    for b in _chunks(len(dataset), batch_size):
        sign = gradient_sign_map(state, dataset.X[b], dataset.y[b])
        parts.append(fgsm_from_sign(dataset.X[b], sign, epsilon, clip))
    adv = np.concatenate(parts) if parts else np.zeros((0, 32, 32, 3))
    pred = forward_logits(state, adv).argmax(1) if len(adv) else np.zeros(0, int)
    return AdversarialSet(
        adv, dataset.y.copy(), list(dataset.source_ids), ["FGSM"] * len(dataset),
        [{"epsilon": float(epsilon), "clip": bool(clip)}] * len(dataset), pred != dataset.y,
        distortion_pct(dataset.X, adv) if len(adv) else np.zeros(0), linf_norm(dataset.X, adv) if len(adv) else np.zeros(0),
        dataset.num_classes, state.fingerprint(), dataset.split,
    )


def jsma_set(model, dataset, rng, max_samples=None, theta=1.0, max_distortion_pct=5.0, successful_only=True):
    """JSMA examples toward a random non-true target for (a subset of) ``dataset``."""
    state = _state(model)
    n = len(dataset)
    idx = np.sort(rng.permutation(n)[:max_samples]) if max_samples is not None else np.arange(n)
    offsets = rng.integers(1, dataset.num_classes, size=len(idx))
    X, keep, params, succ, dist, linf = [], [], [], [], [], []
    for i, off in zip(idx, offsets):
        target = int((dataset.y[i] + off) % dataset.num_classes)
        ex = jsma(state, dataset[i], JsmaConfig(target, theta, max_distortion_pct))
        if successful_only and not ex.success_on_substitute:
            continue
        X.append(ex.perturbed)
        keep.append(int(i))
        params.append(ex.params)
        succ.append(ex.success_on_substitute)
        dist.append(ex.distortion_pct)
        linf.append(ex.linf_norm)
    keep = np.array(keep, dtype=int)
    return AdversarialSet(
        np.stack(X) if X else np.zeros((0, 32, 32, 3)), dataset.y[keep], [dataset.source_ids[i] for i in keep],
        ["JSMA"] * len(keep), params, np.array(succ, dtype=bool), np.array(dist), np.array(linf),
        dataset.num_classes, state.fingerprint(), dataset.split,
    )


def transfer_attack(victim, adversarial_set, temperature=None):
    """Evaluate ``victim`` on crafted images against their true labels."""
    from .evalreport import evaluate

    if len(adversarial_set) == 0:
        raise ValueError("adversarial set is empty")
    state = _state(victim)
    if adversarial_set.crafted_on and adversarial_set.crafted_on == state.fingerprint():
        warnings.warn("adversarial set was crafted on the victim itself; this is a white-box evaluation")
    return evaluate(state, adversarial_set.to_dataset(), temperature=temperature)


# --------------------------------------------------------------------------
# file format

ADV_MAGIC = b"SFADV\x00\x00\x01"


class AdversarialFormatError(ValueError):
    pass


def _put(buf, data):
    buf.write(struct.pack("<I", len(data)))
    buf.write(data)


def dump_adversarial_bytes(adv):
    buf = io.BytesIO()
    buf.write(ADV_MAGIC)
    header = {"crafted_on": adv.crafted_on, "split": adv.split, "num_classes": adv.num_classes}
    _put(buf, json.dumps(header, sort_keys=True).encode())
    buf.write(struct.pack("<I", len(adv)))
    for i in range(len(adv)):
        _put(buf, adv.source_ids[i].encode())
        _put(buf, adv.methods[i].encode())
        _put(buf, json.dumps(adv.params[i], sort_keys=True).encode())
        buf.write(struct.pack("<BBdd", int(adv.y[i]), int(bool(adv.success[i])), float(adv.distortion[i]),
                              float(adv.linf[i])))
        buf.write(np.ascontiguousarray(adv.X[i], dtype="<f8").tobytes())
    return buf.getvalue()


def load_adversarial_bytes(data):
    view = memoryview(data)
    if bytes(view[:8]) != ADV_MAGIC:
        raise AdversarialFormatError("not an adversarial-set file (bad magic)")
    pos = 8

    def take():
        nonlocal pos
        (n,) = struct.unpack_from("<I", view, pos)
        out = bytes(view[pos + 4:pos + 4 + n])
        if len(out) != n:
            raise AdversarialFormatError("truncated adversarial-set file")
        pos += 4 + n
        return out

    try:
        header = json.loads(take())
        (count,) = struct.unpack_from("<I", view, pos)
        pos += 4
        X = np.empty((count, 32, 32, 3))
        y, ids, methods, params, succ, dist, linf = [], [], [], [], [], [], []
        for i in range(count):
            ids.append(take().decode())
            methods.append(take().decode())
            params.append(json.loads(take()))
            label, ok, d, l = struct.unpack_from("<BBdd", view, pos)
            pos += struct.calcsize("<BBdd")
            raw = bytes(view[pos:pos + 3072 * 8])
            if len(raw) != 3072 * 8:
                raise AdversarialFormatError("truncated adversarial-set file")
            X[i] = np.frombuffer(raw, dtype="<f8").reshape(32, 32, 3)
            pos += 3072 * 8
            y.append(label)
            succ.append(bool(ok))
            dist.append(d)
            linf.append(l)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise AdversarialFormatError(f"corrupt adversarial-set file: {exc}") from exc
    if pos != len(view):
        raise AdversarialFormatError("trailing bytes in adversarial-set file")
    return AdversarialSet(X, np.array(y, dtype=np.int64), ids, methods, params, np.array(succ, dtype=bool),
                          np.array(dist), np.array(linf), int(header["num_classes"]), header["crafted_on"],
                          header["split"])


def save_adversarial_set(adv, path):
    data = dump_adversarial_bytes(adv)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_adversarial_set(path):
    return load_adversarial_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# estimator-style wrappers


class FastGradientSign(BaseEstimator):
    """FGSM against a fitted classifier; ``generate(X, y)`` returns crafted images."""

    def __init__(self, estimator=None, epsilon=0.1, clip=True):
        self.estimator = estimator
        self.epsilon = epsilon
        self.clip = clip

    def generate(self, X, y):
        FgsmConfig(self.epsilon, self.clip)
        return fgsm_from_sign(X, gradient_sign_map(self.estimator, X, y), self.epsilon, self.clip)


class SaliencyMapAttack(BaseEstimator):
    """Targeted JSMA; ``generate(X, targets)`` returns crafted images."""

    def __init__(self, estimator=None, theta=1.0, max_distortion_pct=5.0, pair_search=True):
        self.estimator = estimator
        self.theta = theta
        self.max_distortion_pct = max_distortion_pct
        self.pair_search = pair_search

    def generate(self, X, targets):
        out = []
        for x, t in zip(np.asarray(X), np.asarray(targets)):
            cfg = JsmaConfig(int(t), self.theta, self.max_distortion_pct, self.pair_search)
            out.append(jsma(self.estimator, LabeledImage(x, -1), cfg).perturbed)
        return np.stack(out)
