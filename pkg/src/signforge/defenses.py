"""Defensive distillation and adversarial training for the victim network."""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import clone

from .dataio import Dataset, root_source_id
from .models import DeepCNN, estimator_for, predict_proba


class ContaminationError(ValueError):
    """A test-split sample, or something derived from one, reached a training pass."""


@dataclass
class DefenseConfig:
    temperature: float = 100.0
    adv_mix: float = 1.0
    eval_temperature: str = "train_T"
    redistill: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.adv_mix < 0:
            raise ValueError("adv_mix must be >= 0")
        if self.eval_temperature not in ("train_T", "one"):
            raise ValueError("eval_temperature must be 'train_T' or 'one'")

    def evaluation_temperature(self, model_temperature):
        return model_temperature if self.eval_temperature == "train_T" else 1.0


@dataclass
class SoftLabelSet:
    probs: np.ndarray
    temperature: float
    teacher: str = ""

    def __len__(self):
        return len(self.probs)

    def mean_entropy_bits(self):
        p = self.probs
        return float(-(p * np.log2(np.where(p > 0, p, 1.0))).sum(axis=1).mean())


def make_soft_labels(teacher, dataset, temperature=None):
    """Teacher's temperature-softmax outputs on ``dataset``."""
    state = teacher.state_ if hasattr(teacher, "state_") else teacher
    if dataset.num_classes != state.num_classes:
        raise ValueError(f"teacher has {state.num_classes} classes, dataset has {dataset.num_classes}")
    T = state.temperature if temperature is None else temperature
    return SoftLabelSet(predict_proba(state, dataset.X, T), float(T), state.fingerprint())


def dump_soft_labels_bytes(soft):
    buf = io.BytesIO()
    n, k = soft.probs.shape
    buf.write(struct.pack("<IId", n, k, soft.temperature))
    buf.write(np.ascontiguousarray(soft.probs, dtype="<f8").tobytes())
    return buf.getvalue()


def load_soft_labels_bytes(data, teacher=""):
    n, k, T = struct.unpack_from("<IId", data, 0)
    body = data[16:]
    if len(body) != n * k * 8:
        raise ValueError(f"soft-label file holds {len(body)} bytes, header promises {n * k * 8}")
    return SoftLabelSet(np.frombuffer(body, dtype="<f8").reshape(n, k).copy(), T, teacher)


def save_soft_labels(soft, path, manifest_path=None, student=""):
    data = dump_soft_labels_bytes(soft)
    Path(path).write_bytes(data)
    digest = hashlib.sha256(data).hexdigest()
    if manifest_path is not None:
        link = {"teacher": soft.teacher, "soft_labels": digest, "student": student, "temperature": soft.temperature}
        Path(manifest_path).write_text(json.dumps(link, indent=2, sort_keys=True) + "\n")
    return digest


def load_soft_labels(path):
    return load_soft_labels_bytes(Path(path).read_bytes())


def _deep(base, **overrides):
    est = clone(base) if base is not None else DeepCNN()
    return est.set_params(**overrides)


def distill(train_set, base=None, config=None, random_state=0):
    """Two-pass defensive distillation.

    A teacher is trained at ``config.temperature`` on hard labels; a freshly
    initialised student of the same architecture is then trained at the same
    temperature on the teacher's soft labels. ``base`` supplies the remaining
    :class:`DeepCNN` hyperparameters. Returns ``(teacher, student, soft_labels)``.
    """
    config = config or DefenseConfig()
    seeds = np.random.SeedSequence(random_state).generate_state(2)
    teacher = _deep(base, temperature=config.temperature, random_state=int(seeds[0]), warm_start=False)
    teacher.fit(train_set.X, train_set.y)
    soft = make_soft_labels(teacher, train_set)
    student = _deep(base, temperature=config.temperature, random_state=int(seeds[1]), warm_start=False)
    student.fit(train_set.X, soft.probs)
    student.state_.training_manifest["teacher"] = teacher.state_.fingerprint()
    student.state_.training_manifest["soft_labels"] = hashlib.sha256(dump_soft_labels_bytes(soft)).hexdigest()
    return teacher, student, soft


def check_hygiene(train_set, adversarial_set):
    """Raise :class:`ContaminationError` unless every crafted sample stems from ``train_set``."""
    allowed = {root_source_id(s) for s in train_set.source_ids}
    if getattr(adversarial_set, "split", "train") != "train":
        raise ContaminationError(f"adversarial set was crafted from the {adversarial_set.split!r} split")
    bad = sorted({root_source_id(s) for s in adversarial_set.source_ids} - allowed)
    if bad:
        shown = ", ".join(bad[:5])
        raise ContaminationError(f"{len(bad)} adversarial sources are not training samples (e.g. {shown})")


def adversarial_training(model, train_set, adversarial_train_set, config=None, random_state=0, epochs=None):
    """Continue training ``model`` on clean plus crafted samples (true labels).

    ``config.adv_mix`` is the fraction of ``adversarial_train_set`` appended.
    The fitted ``model`` is not modified; a new estimator is returned.
    """
    config = config or DefenseConfig()
    check_hygiene(train_set, adversarial_train_set)
    rng = np.random.default_rng(random_state)
    n_adv = int(round(min(config.adv_mix, 1.0) * len(adversarial_train_set)))
    combined = train_set
    if n_adv:
        pick = np.sort(rng.permutation(len(adversarial_train_set))[:n_adv])
        adv = adversarial_train_set.to_dataset()
        adv.split = train_set.split
        combined = train_set.concat(adv.subset(pick))
    if config.redistill:
        _, student, _ = distill(combined, model, config, random_state)
        return student
    params = dict(random_state=random_state, warm_start=True)
    if epochs is not None:
        params["epochs"] = epochs
    est = estimator_for(model.state_.copy(), **{**model.get_params(), **params})
    est.fit(combined.X, combined.y)
    return est


def distill_then_adversarial_training(train_set, adversarial_train_set, base=None, config=None, random_state=0,
                                      adv_epochs=None):
    """Distillation followed by adversarial training of the student."""
    config = config or DefenseConfig()
    teacher, student, soft = distill(train_set, base, config, random_state)
    defended = adversarial_training(student, train_set, adversarial_train_set, config, random_state + 1, adv_epochs)
    return teacher, student, defended, soft
