"""Command-line front end: prepare, train, attack, defend, report.

Every command reads one declarative config (YAML or JSON), writes its
artifacts into the run directory and records a manifest of input and output
hashes under ``manifests/``. Exit codes: 0 success, 1 internal error,
2 input/config error, 3 data-hygiene violation, 4 manifest corruption.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__

logger = logging.getLogger("signforge")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_HYGIENE, EXIT_MANIFEST = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    """Invalid config or missing input; ``path`` names the offending field."""

    def __init__(self, message, path=None):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class ManifestError(RuntimeError):
    pass


class WhiteBoxRefusal(ConfigError):
    pass


# --------------------------------------------------------------------------
# config


@dataclass
class DatasetSpec:
    source: str = "synthetic"
    path: str | None = None
    num_classes: int = 8
    per_class: int = 200
    test_fraction: float = 0.2
    min_size: int = 32
    max_jitter: float = 2.0


@dataclass
class ModelSpec:
    width: float = 0.5
    learning_rate: float = 0.01
    momentum: float = 0.9
    decay: float = 1e-6
    epochs: int = 8
    batch_size: int = 64
    temperature: float = 1.0
    relu_logits: bool = False


def _substitute_defaults():
    return ModelSpec(width=0.5, learning_rate=0.03, epochs=10, batch_size=64)


def _victim_defaults():
    return ModelSpec(width=0.5, learning_rate=0.01, epochs=8, batch_size=32)


@dataclass
class AttackSpec:
    epsilon: float = 0.1
    clip: bool = True
    eps_from: float = 0.01
    eps_to: float = 0.30
    eps_step: float = 0.01
    theta: float = 1.0
    max_distortion_pct: float = 5.0
    pair_search: bool = True
    jsma_samples: int = 40
    jsma_train_samples: int = 0


@dataclass
class DefenseSpec:
    temperature: float = 100.0
    learning_rate: float = 0.05
    epochs: int = 8
    adv_epochs: int = 5
    adv_mix: float = 1.0
    eval_temperature: str = "train_T"
    redistill: bool = False
    include_jsma: bool = False


STAGES = ("prepare", "train-adversarial", "train-deep", "attack-fgsm", "attack-sweep", "attack-matrix",
          "attack-jsma", "defend", "report")
DEFAULT_STAGES = ["prepare", "train-adversarial", "train-deep", "attack-fgsm", "attack-sweep", "attack-matrix",
                  "defend", "report"]
# which earlier stages each stage consumes
STAGE_DEPS = {
    "prepare": (),
    "train-adversarial": ("prepare",),
    "train-deep": ("prepare",),
    "attack-fgsm": ("train-adversarial",),
    "attack-sweep": ("train-adversarial",),
    "attack-matrix": ("train-adversarial",),
    "attack-jsma": ("train-adversarial",),
    "defend": ("train-deep", "attack-fgsm"),
    "report": (),
}


@dataclass
class ExperimentConfig:
    seed: int | None = None
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    substitute: ModelSpec = field(default_factory=_substitute_defaults)
    victim: ModelSpec = field(default_factory=_victim_defaults)
    attack: AttackSpec = field(default_factory=AttackSpec)
    defense: DefenseSpec = field(default_factory=DefenseSpec)
    stages: list = field(default_factory=lambda: list(DEFAULT_STAGES))
    out: str = "runs/desk"

    def to_dict(self):
        return dataclasses.asdict(self)

    def hash(self):
        """sha256 of the canonical config; the output directory is not part of it."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def stage_seed(self, offset):
        return int(self.seed) + offset

    def validate(self):
        if self.seed is None:
            raise ConfigError("a seed is required (set it in the config or pass --seed)", "seed")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("must be a non-negative integer", "seed")
        ds = self.dataset
        if ds.source not in ("synthetic", "gtsrb"):
            raise ConfigError("must be 'synthetic' or 'gtsrb'", "dataset.source")
        if ds.source == "gtsrb":
            if not ds.path:
                raise ConfigError("required when source is 'gtsrb'", "dataset.path")
            if not Path(ds.path).is_dir():
                raise ConfigError(f"directory does not exist: {ds.path}", "dataset.path")
        else:
            _check(2 <= ds.num_classes <= 43, "must lie in [2, 43]", "dataset.num_classes")
            _check(ds.per_class >= 5, "must be at least 5", "dataset.per_class")
        _check(0 < ds.test_fraction < 1, "must lie in (0, 1)", "dataset.test_fraction")
        _check(ds.max_jitter >= 0, "must be >= 0", "dataset.max_jitter")
        for name in ("substitute", "victim"):
            m = getattr(self, name)
            _check(m.width > 0, "must be positive", f"{name}.width")
            _check(m.learning_rate >= 0, "must be >= 0", f"{name}.learning_rate")
            _check(0 <= m.momentum < 1, "must lie in [0, 1)", f"{name}.momentum")
            _check(m.decay >= 0, "must be >= 0", f"{name}.decay")
            _check(m.epochs >= 1, "must be at least 1", f"{name}.epochs")
            _check(m.batch_size >= 1, "must be at least 1", f"{name}.batch_size")
            _check(m.temperature > 0, "must be positive", f"{name}.temperature")
        a = self.attack
        _check(a.epsilon >= 0, "must be >= 0", "attack.epsilon")
        _check(0 < a.eps_from <= a.eps_to, "need 0 < eps_from <= eps_to", "attack.eps_from")
        _check(a.eps_step > 0, "must be positive", "attack.eps_step")
        _check(0 < a.max_distortion_pct <= 100, "must lie in (0, 100]", "attack.max_distortion_pct")
        _check(a.theta != 0, "must be nonzero", "attack.theta")
        _check(a.jsma_samples >= 0, "must be >= 0", "attack.jsma_samples")
        _check(a.jsma_train_samples >= 0, "must be >= 0", "attack.jsma_train_samples")
        d = self.defense
        _check(d.temperature > 0, "must be positive", "defense.temperature")
        _check(d.adv_mix >= 0, "must be >= 0", "defense.adv_mix")
        _check(d.eval_temperature in ("train_T", "one"), "must be 'train_T' or 'one'", "defense.eval_temperature")
        _check(d.epochs >= 1, "must be at least 1", "defense.epochs")
        _check(d.adv_epochs >= 1, "must be at least 1", "defense.adv_epochs")
        seen = []
        for i, stage in enumerate(self.stages):
            if stage not in STAGES:
                raise ConfigError(f"unknown stage {stage!r} (known: {', '.join(STAGES)})", f"stages[{i}]")
            if stage in seen:
                raise ConfigError(f"stage {stage!r} listed twice", f"stages[{i}]")
            for dep in STAGE_DEPS[stage]:
                if dep not in seen:
                    raise ConfigError(f"{stage!r} needs {dep!r} earlier in the list", f"stages[{i}]")
            seen.append(stage)
        if d.include_jsma and "defend" in seen and "attack-jsma" not in seen[:seen.index("defend")]:
            raise ConfigError("include_jsma needs 'attack-jsma' before 'defend'", "defense.include_jsma")
        return self


def _check(ok, message, path):
    if not ok:
        raise ConfigError(message, path)


def _coerce(value, annotation, path):
    kinds = {"int": int, "float": float, "bool": bool, "str": str}
    names = [n.strip() for n in str(annotation).split("|")]
    if value is None:
        if "None" in names:
            return None
        raise ConfigError("may not be null", path)
    for n in names:
        t = kinds.get(n)
        if t is bool and isinstance(value, bool):
            return value
        if t is int and isinstance(value, int) and not isinstance(value, bool):
            return value
        if t is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if t is str and isinstance(value, str):
            return value
    raise ConfigError(f"expected {' or '.join(names)}, got {type(value).__name__}", path)


def _section(cls, data, path, base=None):
    obj = base if base is not None else cls()
    if not isinstance(data, dict):
        raise ConfigError("expected a mapping", path)
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in known:
            raise ConfigError("unknown field", f"{path}.{key}")
        setattr(obj, key, _coerce(value, known[key].type, f"{path}.{key}"))
    return obj


def config_from_dict(data):
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    cfg = ExperimentConfig()
    sections = {"dataset": DatasetSpec, "substitute": ModelSpec, "victim": ModelSpec, "attack": AttackSpec,
                "defense": DefenseSpec}
    for key, value in data.items():
        if key in sections:
            setattr(cfg, key, _section(sections[key], value, key, getattr(cfg, key)))
        elif key == "seed":
            cfg.seed = _coerce(value, "int | None", "seed")
        elif key == "out":
            cfg.out = _coerce(value, "str", "out")
        elif key == "stages":
            if not isinstance(value, list) or not all(isinstance(s, str) for s in value):
                raise ConfigError("expected a list of stage names", "stages")
            cfg.stages = list(value)
        else:
            raise ConfigError("unknown field", key)
    return cfg


def load_config(path=None, seed=None, out=None):
    """Read a YAML or JSON config, apply command-line overrides and validate."""
    data = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        text = p.read_text()
        try:
            if p.suffix == ".json":
                data = json.loads(text)
            else:
                import yaml

                data = yaml.safe_load(text) or {}
        except Exception as exc:  # parser errors differ between json and yaml
            raise ConfigError(f"cannot parse {p}: {exc}") from exc
    cfg = config_from_dict(data)
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out = str(out)
    return cfg.validate()


# --------------------------------------------------------------------------
# run directory and manifests


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunDir:
    """Artifact paths of one run, all relative to ``root``."""

    DATA_TRAIN = "data/train.sfd"
    DATA_TEST = "data/test.sfd"
    HISTOGRAM = "data/histogram.csv"
    SUBSTITUTE = "models/substitute.sfm"
    VICTIM = "models/victim.sfm"
    FGSM_TEST = "attacks/fgsm_test.sfa"
    FGSM_TRAIN = "attacks/fgsm_train.sfa"
    JSMA_TEST = "attacks/jsma_test.sfa"
    JSMA_TRAIN = "attacks/jsma_train.sfa"
    SWEEP = "attacks/sweep.csv"
    MATRIX = "attacks/jsma_matrix.csv"
    DEFENDED = "defense/defended.sfm"
    COMPARISON = "defense/comparison.csv"

    def __init__(self, root):
        self.root = Path(root)

    def path(self, rel):
        return self.root / rel

    def write_bytes(self, rel, data):
        p = self.path(rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(data)
        return rel

    def write_text(self, rel, text):
        return self.write_bytes(rel, text.encode())

    def require(self, rel, stage):
        if not self.path(rel).is_file():
            raise ConfigError(f"missing input {self.path(rel)} (run '{stage}' first)")
        return self.path(rel)

    def manifest_path(self, stage):
        return self.path(f"manifests/{stage}.json")


def manifest_digest(manifest):
    """Hash of a stage manifest without its wall-clock field."""
    body = {k: v for k, v in manifest.items() if k != "wall_clock_s"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


class Stage:
    """Context manager recording one stage's inputs, outputs and timing."""

    def __init__(self, run, stage, cfg):
        self.run, self.stage, self.cfg = run, stage, cfg
        self.inputs, self.outputs = {}, {}

    def __enter__(self):
        self.t0 = time.perf_counter()
        logger.info("stage %s -> %s", self.stage, self.run.root)
        return self

    def read(self, rel, producer):
        p = self.run.require(rel, producer)
        self.inputs[rel] = sha256_file(p)
        return p

    def wrote(self, *rels):
        for rel in rels:
            self.outputs[rel] = sha256_file(self.run.path(rel))

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            return False
        manifest = {
            "stage": self.stage,
            "tool_version": __version__,
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "wall_clock_s": round(time.perf_counter() - self.t0, 3),
        }
        p = self.run.manifest_path(self.stage)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        logger.info("stage %s done in %.1fs", self.stage, manifest["wall_clock_s"])
        return False


def read_manifest(run, stage):
    p = run.manifest_path(stage)
    if not p.is_file():
        raise ManifestError(f"missing manifest for stage {stage!r}: {p}")
    try:
        m = json.loads(p.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ManifestError(f"corrupt manifest {p}: {exc}") from exc
    required = {"stage": str, "tool_version": str, "config_hash": str, "inputs": dict, "outputs": dict}
    if not isinstance(m, dict) or any(not isinstance(m.get(k), t) for k, t in required.items()):
        raise ManifestError(f"corrupt manifest {p}: missing or mistyped fields")
    if m["stage"] != stage:
        raise ManifestError(f"corrupt manifest {p}: names stage {m['stage']!r}")
    return m


def verify_run(run, stages):
    """Check every stage manifest against the files on disk; returns ``{stage: manifest}``."""
    manifests = {s: read_manifest(run, s) for s in stages}
    hashes = {m["config_hash"] for m in manifests.values()}
    if len(hashes) > 1:
        raise ManifestError(f"stages were run with different configs: {sorted(hashes)}")
    for stage, m in manifests.items():
        for kind in ("outputs", "inputs"):
            for rel, digest in m[kind].items():
                p = run.path(rel)
                if not p.is_file():
                    raise ManifestError(f"{stage}: artifact {rel} (sha256 {digest}) is missing")
                actual = sha256_file(p)
                if actual != digest:
                    raise ManifestError(f"{stage}: artifact {rel} has sha256 {actual}, manifest records {digest}")
    return manifests


# --------------------------------------------------------------------------
# stage implementations


def _csv(rows, header):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _loss_csv(curve):
    return _csv([(i + 1, f"{a:.6f}", f"{b:.6f}") for i, (a, b) in enumerate(curve)], ["epoch", "train_loss", "eval_loss"])


def cmd_prepare(cfg, run):
    from .dataio import generate_synthetic, load_gtsrb, rebalance, save_dataset

    with Stage(run, "prepare", cfg) as st:
        ds = cfg.dataset
        if ds.source == "gtsrb":
            if not Path(ds.path).is_dir():
                raise ConfigError(f"directory does not exist: {ds.path}", "dataset.path")
            train, test = load_gtsrb(ds.path, ds.min_size)
        else:
            train, test = generate_synthetic(ds.num_classes, ds.per_class, cfg.seed, ds.test_fraction)
        before = train.class_histogram
        train = rebalance(train, np.random.default_rng(cfg.stage_seed(1)), ds.max_jitter)
        after = train.class_histogram
        run.path("data").mkdir(parents=True, exist_ok=True)
        save_dataset(train, run.path(RunDir.DATA_TRAIN))
        save_dataset(test, run.path(RunDir.DATA_TEST))
        rows = [(c, int(b), int(a)) for c, (b, a) in enumerate(zip(before, after))]
        run.write_text(RunDir.HISTOGRAM, _csv(rows, ["class", "before", "after"]))
        saved = cfg.to_dict()
        saved.pop("out")
        run.write_text("config.json", json.dumps(saved, indent=2, sort_keys=True) + "\n")
        st.wrote(RunDir.DATA_TRAIN, RunDir.DATA_TEST, RunDir.HISTOGRAM, "config.json")
    print(f"prepared {len(train)} train / {len(test)} test images; min class {after.min()} >= mean {before.mean():.1f}")
    return EXIT_OK


def cmd_train(cfg, run, which):
    from .dataio import load_dataset
    from .evalreport import evaluate
    from .models import AdversarialCNN, DeepCNN

    stage = "train-adversarial" if which == "adversarial" else "train-deep"
    spec = cfg.substitute if which == "adversarial" else cfg.victim
    name = "substitute" if which == "adversarial" else "victim"
    with Stage(run, stage, cfg) as st:
        train = load_dataset(st.read(RunDir.DATA_TRAIN, "prepare"))
        test = load_dataset(st.read(RunDir.DATA_TEST, "prepare"))
        common = dict(n_classes=train.num_classes, width=spec.width, learning_rate=spec.learning_rate,
                      momentum=spec.momentum, decay=spec.decay, epochs=spec.epochs, batch_size=spec.batch_size)
        if which == "adversarial":
            est = AdversarialCNN(random_state=cfg.stage_seed(1), **common)
        else:
            est = DeepCNN(temperature=spec.temperature, relu_logits=spec.relu_logits,
                          random_state=cfg.stage_seed(2), **common)
        est.fit(train.X, train.y)
        model_rel = f"models/{name}.sfm"
        run.path("models").mkdir(parents=True, exist_ok=True)
        est.save(run.path(model_rel))
        report = evaluate(est, test)
        run.write_text(f"models/{name}_loss.csv", _loss_csv(est.loss_curve_))
        run.write_text(f"models/{name}_metrics.csv", report.to_csv())
        st.wrote(model_rel, f"models/{name}_loss.csv", f"models/{name}_metrics.csv")
    print(f"{name}: test accuracy {report.accuracy:.4f}")
    return EXIT_OK


def _attack_model(run, st, white_box, model):
    from .models import load_model

    if model == "victim":
        if not white_box:
            raise WhiteBoxRefusal(
                "refusing to craft on the victim model: the attack stage only sees the substitute "
                "(black-box setting). Pass --white-box to override.")
        return load_model(st.read(RunDir.VICTIM, "train-deep")), "victim"
    return load_model(st.read(RunDir.SUBSTITUTE, "train-adversarial")), "substitute"


def _dump_examples(run, rel_dir, originals, perturbed, limit=16):
    from PIL import Image

    rels = []
    for i in range(min(limit, len(originals))):
        pair = np.concatenate([originals[i], perturbed[i]], axis=1)
        img = Image.fromarray(np.round(np.clip(pair, 0, 1) * 255).astype(np.uint8))
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        rels.append(run.write_bytes(f"{rel_dir}/{i:03d}.png", buf.getvalue()))
    return rels


def cmd_attack(cfg, run, method, white_box=False, model="substitute", dump_examples=False):
    from .attacks import epsilon_sweep, fgsm_set, jsma_matrix, jsma_set, save_adversarial_set
    from .dataio import load_dataset

    a = cfg.attack
    stage = f"attack-{method}"
    with Stage(run, stage, cfg) as st:
        state, tag = _attack_model(run, st, white_box, model)
        test = load_dataset(st.read(RunDir.DATA_TEST, "prepare"))
        suffix = "" if tag == "substitute" else "_whitebox"
        run.path("attacks").mkdir(parents=True, exist_ok=True)
        if method == "fgsm":
            train = load_dataset(st.read(RunDir.DATA_TRAIN, "prepare"))
            adv_test = fgsm_set(state, test, a.epsilon, a.clip)
            adv_train = fgsm_set(state, train, a.epsilon, a.clip)
            rels = [f"attacks/fgsm_test{suffix}.sfa", f"attacks/fgsm_train{suffix}.sfa"]
            save_adversarial_set(adv_test, run.path(rels[0]))
            save_adversarial_set(adv_train, run.path(rels[1]))
            rels.append(run.write_text(f"attacks/fgsm_test{suffix}.csv", adv_test.summary_csv()))
            if dump_examples:
                rels += _dump_examples(run, f"attacks/examples/fgsm{suffix}", test.X, adv_test.X)
            summary = f"FGSM eps={a.epsilon}: {adv_test.success.mean():.1%} of test images misclassified by the {tag}"
        elif method == "sweep":
            sweep = epsilon_sweep(state, test, a.eps_from, a.eps_to, a.eps_step)
            rels = [run.write_text(f"attacks/sweep{suffix}.csv", sweep.to_csv())]
            summary = f"sweep: {len(sweep.rows)} rows, accuracy {sweep.accuracies[0]:.3f} -> {sweep.accuracies[-1]:.3f}"
        elif method == "matrix":
            samples = [test[i] for i in test.one_per_class()]
            m = jsma_matrix(state, samples, a.theta, a.max_distortion_pct, a.pair_search)
            rels = [run.write_text(f"attacks/jsma_matrix{suffix}.csv", m.to_csv())]
            if dump_examples:
                rels += _dump_examples(run, f"attacks/examples/matrix{suffix}",
                                       np.stack([e.original.pixels for e in m.examples]),
                                       np.stack([e.perturbed for e in m.examples]), limit=len(m.examples))
            summary = f"JSMA matrix: success {m.success_rate:.1%}, mean distortion {m.mean_distortion:.2f}%"
        elif method == "jsma":
            rng = np.random.default_rng(cfg.stage_seed(4))
            adv = jsma_set(state, test, rng, a.jsma_samples or None, a.theta, a.max_distortion_pct)
            rels = [f"attacks/jsma_test{suffix}.sfa"]
            save_adversarial_set(adv, run.path(rels[0]))
            rels.append(run.write_text(f"attacks/jsma_test{suffix}.csv", adv.summary_csv()))
            if a.jsma_train_samples:
                train = load_dataset(st.read(RunDir.DATA_TRAIN, "prepare"))
                adv_train = jsma_set(state, train, rng, a.jsma_train_samples, a.theta, a.max_distortion_pct)
                save_adversarial_set(adv_train, run.path(f"attacks/jsma_train{suffix}.sfa"))
                rels.append(f"attacks/jsma_train{suffix}.sfa")
            if dump_examples and len(adv):
                idx = [test.source_ids.index(s) for s in adv.source_ids]
                rels += _dump_examples(run, f"attacks/examples/jsma{suffix}", test.X[idx], adv.X)
            summary = f"JSMA: kept {len(adv)} successful examples"
        else:
            raise ConfigError(f"unknown attack method {method!r}")
        st.wrote(*rels)
    print(summary)
    return EXIT_OK


def cmd_defend(cfg, run):
    from .attacks import load_adversarial_set
    from .dataio import load_dataset
    from .defenses import DefenseConfig, check_hygiene, distill_then_adversarial_training, save_soft_labels
    from .evalreport import compare_runs, evaluate
    from .models import DeepCNN, load_estimator

    d, v = cfg.defense, cfg.victim
    with Stage(run, "defend", cfg) as st:
        train = load_dataset(st.read(RunDir.DATA_TRAIN, "prepare"))
        test = load_dataset(st.read(RunDir.DATA_TEST, "prepare"))
        victim = load_estimator(st.read(RunDir.VICTIM, "train-deep"))
        adv_train = load_adversarial_set(st.read(RunDir.FGSM_TRAIN, "attack-fgsm"))
        adv_test = load_adversarial_set(st.read(RunDir.FGSM_TEST, "attack-fgsm"))
        if d.include_jsma:
            adv_train = adv_train.concat(load_adversarial_set(st.read(RunDir.JSMA_TRAIN, "attack-jsma")))
        check_hygiene(train, adv_train)
        config = DefenseConfig(d.temperature, d.adv_mix, d.eval_temperature, d.redistill)
        base = DeepCNN(n_classes=train.num_classes, width=v.width, relu_logits=v.relu_logits,
                       learning_rate=d.learning_rate, momentum=v.momentum, decay=v.decay, epochs=d.epochs,
                       batch_size=v.batch_size)
        teacher, student, defended, soft = distill_then_adversarial_training(
            train, adv_train, base, config, cfg.stage_seed(3), d.adv_epochs)
        run.path("defense").mkdir(parents=True, exist_ok=True)
        teacher.save(run.path("defense/teacher.sfm"))
        student.save(run.path("defense/student.sfm"))
        defended.save(run.path(RunDir.DEFENDED))
        save_soft_labels(soft, run.path("defense/soft_labels.bin"), run.path("defense/distillation.json"),
                         student.state_.fingerprint())

        adv_ds = adv_test.to_dataset()
        T = config.evaluation_temperature(d.temperature)
        reports = {
            ("undefended", "legit"): evaluate(victim, test),
            ("undefended", "adversarial"): evaluate(victim, adv_ds),
            ("distilled", "legit"): evaluate(student, test, T),
            ("defended", "legit"): evaluate(defended, test, T),
            ("defended", "adversarial"): evaluate(defended, adv_ds, T),
        }
        cells = [(m, f"{reports[m, 'legit'].accuracy:.6f}", f"{reports[m, 'adversarial'].accuracy:.6f}")
                 for m in ("undefended", "defended")]
        run.write_text(RunDir.COMPARISON, _csv(cells, ["model", "legit_accuracy", "adversarial_accuracy"]))
        by_model = compare_runs([reports["undefended", "legit"], reports["distilled", "legit"],
                               reports["defended", "legit"]], ["undefended", "distilled", "distilled+adversarial"])
        undefended_tbl = compare_runs([reports["undefended", "legit"], reports["undefended", "adversarial"]],
                              ["legit", "adversarial"])
        defended_tbl = compare_runs([reports["defended", "legit"], reports["defended", "adversarial"]],
                              ["legit", "adversarial"])
        run.write_text("defense/clean_by_model.csv", by_model.to_csv())
        run.write_text("defense/undefended.csv", undefended_tbl.to_csv())
        run.write_text("defense/defended.csv", defended_tbl.to_csv())
        st.wrote("defense/teacher.sfm", "defense/student.sfm", RunDir.DEFENDED, "defense/soft_labels.bin",
                 "defense/distillation.json", RunDir.COMPARISON, "defense/clean_by_model.csv",
                 "defense/undefended.csv", "defense/defended.csv")
    print(_csv(cells, ["model", "legit_accuracy", "adversarial_accuracy"]), end="")
    return EXIT_OK


def cmd_report(run, stages=None):
    """Verify every stage manifest, then write ``report/report.txt``, the plot and ``report/run_manifest.json``."""
    from scipy.stats import spearmanr

    from .evalreport import parse_sweep_csv, plot_epsilon_curve

    cfg_path = run.path("config.json")
    if not cfg_path.is_file():
        raise ManifestError(f"{run.root} is not a run directory (no config.json)")
    try:
        cfg_data = json.loads(cfg_path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"corrupt config.json: {exc}") from exc
    if stages is None:
        stages = [s for s in cfg_data.get("stages", DEFAULT_STAGES) if s != "report"]
    manifests = verify_run(run, stages)
    lines = [f"signforge {__version__} run report", ""]
    any_m = next(iter(manifests.values()), None)
    if any_m:
        lines += [f"config hash  {any_m['config_hash']}", f"seed         {any_m.get('seed')}", ""]

    if run.path(RunDir.HISTOGRAM).is_file():
        rows = list(csv.DictReader(io.StringIO(run.path(RunDir.HISTOGRAM).read_text())))
        before = [int(r["before"]) for r in rows]
        after = [int(r["after"]) for r in rows]
        lines += ["[data]", f"classes {len(rows)}, train before rebalance {sum(before)}, after {sum(after)}, "
                  f"min class after {min(after)}, mean before {np.mean(before):.2f}", ""]
    for name in ("substitute", "victim"):
        p = run.path(f"models/{name}_metrics.csv")
        if p.is_file():
            vals = {r["metric"]: r["value"] for r in csv.DictReader(io.StringIO(p.read_text()))}
            lines += [f"[{name}]", f"test accuracy {vals['accuracy']}, cross-entropy {vals['cross_entropy']}, "
                      f"macro-F1 {vals['macro_f1']}", ""]
    outputs = []
    if run.path(RunDir.SWEEP).is_file():
        text = run.path(RunDir.SWEEP).read_text()
        rows = parse_sweep_csv(text)
        eps = np.array([r[0] for r in rows])
        acc = np.array([r[1] for r in rows])
        nz = eps > 0
        rho = spearmanr(eps[nz], acc[nz]).statistic if nz.sum() > 1 else float("nan")
        lines += ["[epsilon sweep]", f"{len(rows)} rows, accuracy {acc[0]:.4f} at eps={eps[0]:.2f} to "
                  f"{acc[-1]:.4f} at eps={eps[-1]:.2f}, spearman {rho:.4f}", ""]
        run.path("report").mkdir(parents=True, exist_ok=True)
        plot_epsilon_curve(text, run.path("report/epsilon_curve.svg"))
        outputs.append("report/epsilon_curve.svg")
    if run.path(RunDir.MATRIX).is_file():
        rows = list(csv.DictReader(io.StringIO(run.path(RunDir.MATRIX).read_text())))
        ok = [r for r in rows if r["success"] == "1"]
        mean_d = np.mean([float(r["distortion_pct"]) for r in ok]) if ok else float("nan")
        lines += ["[jsma matrix]", f"{len(ok)}/{len(rows)} targeted successes ({len(ok) / max(len(rows), 1):.1%}), "
                  f"mean distortion of successes {mean_d:.3f}%", ""]
    for rel, title in ((RunDir.COMPARISON, "defense: accuracy on legit / adversarial samples"),
                       ("defense/clean_by_model.csv", "defense: clean metrics by model")):
        if run.path(rel).is_file():
            rows = list(csv.reader(io.StringIO(run.path(rel).read_text())))
            widths = [max(len(r[j]) for r in rows) for j in range(len(rows[0]))]
            lines += [f"[{title}]"] + ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows] + [""]
    lines += ["[stages]"] + [f"{s:<18} {manifest_digest(m)}" for s, m in manifests.items()]
    run.write_text("report/report.txt", "\n".join(lines) + "\n")
    outputs.append("report/report.txt")
    run_manifest = {
        "tool_version": __version__,
        "config_hash": any_m["config_hash"] if any_m else None,
        "stages": {s: {"digest": manifest_digest(m), "inputs": m["inputs"], "outputs": m["outputs"]}
                   for s, m in manifests.items()},
        "report": {rel: sha256_file(run.path(rel)) for rel in outputs},
    }
    run_manifest["run_digest"] = hashlib.sha256(json.dumps(run_manifest, sort_keys=True).encode()).hexdigest()
    run.write_text("report/run_manifest.json", json.dumps(run_manifest, indent=2, sort_keys=True) + "\n")
    print((run.path("report/report.txt")).read_text(), end="")
    return EXIT_OK


def cmd_run(cfg, run, white_box=False, dump_examples=False):
    for stage in cfg.stages:
        if stage == "prepare":
            cmd_prepare(cfg, run)
        elif stage.startswith("train-"):
            cmd_train(cfg, run, "adversarial" if stage == "train-adversarial" else "deep")
        elif stage.startswith("attack-"):
            cmd_attack(cfg, run, stage.split("-", 1)[1], dump_examples=dump_examples)
        elif stage == "defend":
            cmd_defend(cfg, run)
        elif stage == "report":
            cmd_report(run)
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="signforge", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"signforge {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML or JSON experiment config")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", type=Path, help="run directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="load or generate data, rebalance, write the cache")
    p = sub.add_parser("train", parents=[common], help="train the substitute or the victim")
    p.add_argument("--which", choices=("adversarial", "deep"), required=True)
    p = sub.add_parser("attack", parents=[common], help="craft adversarial examples on the substitute")
    p.add_argument("--method", choices=("fgsm", "jsma", "sweep", "matrix"), required=True)
    p.add_argument("--model", choices=("substitute", "victim"), default="substitute",
                   help="model to craft on; 'victim' requires --white-box")
    p.add_argument("--white-box", action="store_true", help="allow crafting on the victim model")
    p.add_argument("--dump-examples", action="store_true", help="write original|perturbed PNG pairs")
    sub.add_parser("defend", parents=[common], help="distillation followed by adversarial training")
    p = sub.add_parser("report", parents=[common], help="verify manifests and aggregate results")
    p.add_argument("run_dir", nargs="?", type=Path)
    p = sub.add_parser("run", parents=[common], help="run every stage listed in the config")
    p.add_argument("--dump-examples", action="store_true")
    return parser


def _apply_thread_limit():
    n = os.environ.get("SIGNFORGE_THREADS")
    if not n:
        return None
    try:
        n = int(n)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"SIGNFORGE_THREADS must be a positive integer, got {os.environ['SIGNFORGE_THREADS']!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _dispatch(args):
    if args.command == "report":
        root = args.run_dir or args.out
        if root is None:
            root = load_config(args.config, args.seed).out if args.config else "runs/desk"
        return cmd_report(RunDir(root))
    root_hint = args.out
    cfg_path = args.config
    if cfg_path is None and root_hint is not None and (Path(root_hint) / "config.json").is_file() \
            and args.command != "prepare":
        cfg_path = Path(root_hint) / "config.json"
    cfg = load_config(cfg_path, args.seed, args.out)
    run = RunDir(cfg.out)
    if args.command == "prepare":
        return cmd_prepare(cfg, run)
    if args.command == "train":
        return cmd_train(cfg, run, args.which)
    if args.command == "attack":
        return cmd_attack(cfg, run, args.method, args.white_box, args.model, args.dump_examples)
    if args.command == "defend":
        return cmd_defend(cfg, run)
    return cmd_run(cfg, run, dump_examples=args.dump_examples)


def main(argv=None):
    from .dataio import DataError
    from .defenses import ContaminationError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = _apply_thread_limit()
        try:
            return _dispatch(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except ContaminationError as exc:
        print(f"error: data hygiene violation: {exc}", file=sys.stderr)
        return EXIT_HYGIENE
    except ManifestError as exc:
        print(f"error: manifest check failed: {exc}", file=sys.stderr)
        return EXIT_MANIFEST
    except (ConfigError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # anything else is a bug
        logger.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
