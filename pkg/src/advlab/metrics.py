"""Evaluation metrics: rank-based AUC, the two machine-checkable whitebox
success conditions, distortion statistics, and the epsilon sweep."""

from __future__ import annotations

import numpy as np

from .attacks import ATTACKS, PerturbationBudget, adapt_detector_bypass
from .data import LabeledDataset
from .defense import DetectorEnsemble, EnsembleDetector, EnsembleTowardClassTarget
from .errors import ContractError, DimensionError


def auc(benign_scores, adversarial_scores) -> float:
    """P(random adversarial score > random benign score), ties counted 1/2.

    Computed by midrank aggregation in O(n log n); exactly equals pairwise
    counting for modest n."""
    b = np.asarray(benign_scores, dtype=np.float64).reshape(-1)
    a = np.asarray(adversarial_scores, dtype=np.float64).reshape(-1)
    if len(b) == 0 or len(a) == 0:
        raise ContractError("auc requires nonempty score lists")
    scores = np.concatenate([b, a])
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores))
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average of ranks i+1 .. j+1
        i = j + 1
    u = ranks[len(b) :].sum() - 0.5 * len(a) * (len(a) + 1)
    return float(u / (len(a) * len(b)))


def distortion(x_b: np.ndarray, x_a: np.ndarray) -> tuple[float, float]:
    """(L-infinity on the [0,1] scale, 255 * ||delta||_2 / sqrt(d))."""
    x_b = np.asarray(x_b, dtype=np.float64)
    x_a = np.asarray(x_a, dtype=np.float64)
    if x_b.shape != x_a.shape:
        raise DimensionError(f"distortion: shapes {x_b.shape} and {x_a.shape} differ")
    delta = (x_a - x_b).reshape(-1)
    return float(np.abs(delta).max()), float(255.0 * np.linalg.norm(delta) / np.sqrt(delta.size))


def success_conditions(ensemble: DetectorEnsemble, x_a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-item booleans against the predicted class's benign means:
    C1: vulnerable score below the mean (detector bypassed);
    C2: robust score above the mean (classifier convinced)."""
    ensemble.require_baselines()
    x_a = np.asarray(x_a, dtype=np.float64)
    labels = ensemble.classify(x_a)
    mean_v = np.array([ensemble.vaes[c].baseline.mean_v for c in labels])
    mean_r = np.array([ensemble.vaes[c].baseline.mean_r for c in labels])
    s_v = ensemble.vuln_scores_at(x_a, labels)
    s_r = np.array([ensemble.vaes[c].score_r(x_a[i : i + 1])[0] for i, c in enumerate(labels)])
    return s_v < mean_v, s_r > mean_r


def success_ratio(outcomes, ensemble: DetectorEnsemble) -> float:
    """Fraction of attack outcomes satisfying C1 and C2."""
    if not len(outcomes):
        raise ContractError("success_ratio of an empty outcome list is undefined")
    if hasattr(outcomes[0], "x_a"):
        x_a = np.stack([oc.x_a for oc in outcomes])
    else:
        x_a = np.asarray(outcomes)
    c1, c2 = success_conditions(ensemble, x_a)
    return float(np.mean(c1 & c2))


def sweep_epsilon(
    ensemble: DetectorEnsemble,
    attack_name: str,
    dataset: LabeledDataset,
    eps_list,
    budget: PerturbationBudget,
    *,
    gamma0: float = 1.0,
    count: int = 64,
    rng=None,
) -> list[tuple[float, float]]:
    """Whitebox success ratio per epsilon; all other attack parameters fixed.

    Each grid point runs on the same input subset with its own rng child
    derived from the master seed, so points are independent and reproducible."""
    eps_list = [float(e) for e in eps_list]
    if any(nxt <= prev for prev, nxt in zip(eps_list, eps_list[1:])):
        raise ContractError("epsilon grid must be strictly increasing")
    if attack_name not in ATTACKS:
        raise ContractError(f"unknown attack '{attack_name}'")
    if rng is None:
        rng = np.random.default_rng(0)
    pick = rng.choice(len(dataset), size=min(count, len(dataset)), replace=False)
    x, y = dataset.images[pick], dataset.labels[pick]
    target = EnsembleTowardClassTarget.toward_most_susceptible(ensemble, x, y)
    detector = EnsembleDetector(ensemble)
    point_seeds = [int(rng.integers(2**63)) for _ in eps_list]
    curve = []
    for eps, seed in zip(eps_list, point_seeds):
        outcomes = adapt_detector_bypass(
            attack_name, target, detector, x, y, budget.with_epsilon(eps),
            gamma0=gamma0, rng=np.random.default_rng(seed),
        )
        curve.append((eps, success_ratio(outcomes, ensemble)))
    return curve
