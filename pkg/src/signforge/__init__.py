"""Adversarial crafting, transfer and hardening for small road-sign CNNs."""

__version__ = "0.1.0"

from .models import AdversarialCNN, DeepCNN, ModelState, load_estimator, load_model, save_model  # noqa: E402
from .attacks import FastGradientSign, SaliencyMapAttack, epsilon_sweep, fgsm, jsma, jsma_matrix  # noqa: E402
from .dataio import Dataset, generate_synthetic, load_gtsrb, rebalance  # noqa: E402
from .defenses import DefenseConfig, adversarial_training, distill  # noqa: E402
from .evalreport import MetricsReport, compare_runs, evaluate  # noqa: E402

__all__ = [
    "AdversarialCNN", "DeepCNN", "ModelState", "load_estimator", "load_model", "save_model",
    "FastGradientSign", "SaliencyMapAttack", "epsilon_sweep", "fgsm", "jsma", "jsma_matrix",
    "Dataset", "generate_synthetic", "load_gtsrb", "rebalance",
    "DefenseConfig", "adversarial_training", "distill",
    "MetricsReport", "compare_runs", "evaluate",
]
