"""The vulnerable-feature experiment: accumulate a dataset of adversarial
inputs under discriminator pressure, then show a fresh classifier trained on
nothing else still generalizes.

Per iteration an attack adapted with a signed discriminator term perturbs
benign inputs against the pretrained classifier; untargeted successes join
the pool labeled with the (wrong) predicted class, and the discriminator is
refit to separate benign (0) from pooled (1) inputs, forcing later iterations
onto fresh directions. Inputs the classifier already gets wrong are never
attacked, and the pool provably contains no benign original."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .attacks import ATTACKS, ClassifierTarget, PerturbationBudget, adapt_discriminator_bypass
from .data import LabeledDataset
from .errors import ContractError
from .nets import Network
from .train import accuracy, predict_labels, train_classifier, train_discriminator


@dataclass
class PoolItem:
    origin_index: int
    original_label: int
    assigned_label: int
    attack: str
    linf: float
    l2: float


@dataclass
class PoolBuildResult:
    pool: LabeledDataset
    provenance: list[PoolItem]
    history: list[dict] = field(default_factory=list)


def build_pool(
    classifier: Network,
    discriminator: Network,
    benign: LabeledDataset,
    attack_name: str,
    budget: PerturbationBudget,
    d_weight: float,
    iteration_limit: int,
    per_iteration: int,
    d_epochs: int = 25,
    d_lr: float = 5e-3,
    d_batch: int = 64,
    rng=None,
) -> PoolBuildResult:
    """Accumulate the vulnerable-feature pool over iteration_limit rounds."""
    if iteration_limit < 1:
        raise ContractError("iteration limit must be >= 1; an empty pool is useless")
    if attack_name not in ATTACKS:
        raise ContractError(f"unknown attack '{attack_name}'")
    if rng is None:
        rng = np.random.default_rng(0)

    benign_hashes = {img.tobytes() for img in benign.images}
    preds = predict_labels(classifier, benign.images)
    correct = np.flatnonzero(preds == benign.labels)
    if len(correct) == 0:
        raise ContractError("the pretrained classifier gets every input wrong")

    adapted = adapt_discriminator_bypass(ATTACKS[attack_name], discriminator, d_weight)
    target = ClassifierTarget(classifier)

    images: list[np.ndarray] = []
    labels: list[int] = []
    provenance: list[PoolItem] = []
    history: list[dict] = []
    for it in range(iteration_limit):
        pick = rng.choice(correct, size=min(per_iteration, len(correct)), replace=False)
        outcomes = adapted(
            target, benign.images[pick], benign.labels[pick], budget,
            rng=np.random.default_rng(rng.integers(2**63)),
        )
        added = 0
        skipped_benign = 0
        for src, oc in zip(pick, outcomes):
            if not oc.misled:
                continue
            if oc.x_a.tobytes() in benign_hashes:
                skipped_benign += 1
                continue
            images.append(oc.x_a)
            labels.append(oc.y_pred)
            provenance.append(
                PoolItem(int(src), int(oc.true_label), int(oc.y_pred), attack_name, oc.linf, oc.l2)
            )
            added += 1
        d_acc = None
        if images:
            d_acc = train_discriminator(
                discriminator, benign.images, np.stack(images),
                epochs=d_epochs, lr=d_lr, batch_size=d_batch,
                rng=np.random.default_rng(rng.integers(2**63)),
            )
        history.append(
            {"iteration": it, "added": added, "pool": len(images),
             "skipped_benign": skipped_benign, "d_accuracy": d_acc}
        )

    pool = LabeledDataset(
        np.stack(images) if images else np.zeros((0,) + benign.input_shape),
        np.asarray(labels, dtype=np.int64),
        benign.num_classes,
        f"vulnerable-pool[{attack_name}]",
    )
    return PoolBuildResult(pool, provenance, history)


def split_pool(pool: LabeledDataset, heldout_fraction: float = 0.1) -> tuple[LabeledDataset, LabeledDataset]:
    """Train/held-out split by insertion order (last fraction held out)."""
    if not 0.0 < heldout_fraction < 1.0:
        raise ContractError("heldout_fraction must lie in (0, 1)")
    cut = len(pool) - max(1, int(round(len(pool) * heldout_fraction)))
    if cut < 1:
        raise ContractError("pool too small to split")
    idx = np.arange(len(pool))
    return pool.take(idx[:cut]), pool.take(idx[cut:])


def train_and_eval_fv(
    fv: Network,
    pool_train: LabeledDataset,
    benign_train: LabeledDataset,
    benign_test: LabeledDataset,
    pool_test: LabeledDataset,
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 32,
    rng=None,
) -> tuple[float, float]:
    """Train a fresh classifier on the pool alone; report benign-test accuracy
    and held-out pool accuracy. Rejects pools that overlap the benign set."""
    if len(pool_train) == 0:
        raise ContractError("pool is empty")
    benign_hashes = {img.tobytes() for img in benign_train.images}
    for img in pool_train.images:
        if img.tobytes() in benign_hashes:
            raise ContractError("pool contains a benign original; the experiment is void")
    if len(np.unique(pool_train.labels)) < 2:
        raise ContractError("pool covers a single label; nothing to classify")
    if rng is None:
        rng = np.random.default_rng(0)
    train_classifier(fv, pool_train, epochs=epochs, lr=lr, batch_size=batch_size, rng=rng)
    return accuracy(fv, benign_test), accuracy(fv, pool_test)


def provenance_json(items: list[PoolItem]) -> str:
    return json.dumps(
        {
            "schema": "advlab-pool-provenance/1",
            "items": [vars(item) for item in items],
        },
        indent=2,
        sort_keys=True,
    )
