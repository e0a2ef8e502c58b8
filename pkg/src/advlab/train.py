"""Optimization utilities: Adam, cross-entropy training for softmax networks,
and binary-cross-entropy training for the sigmoid discriminator."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .data import LabeledDataset
from .errors import ContractError
from .nets import Network
from .tensor import Tape, Tensor, backward


class Adam:
    """Adaptive moment estimation over a named parameter collection."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood from pre-softmax logits (stable)."""
    labels = np.asarray(labels, dtype=np.int64)
    lse = T.logsumexp(logits)
    picked = T.gather_cols(logits, labels)
    return (lse - picked).mean()


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Numerically stable binary cross entropy on a (N, 1) logit column."""
    t = Tensor(np.asarray(targets, dtype=np.float64).reshape(logits.shape), requires_grad=False)
    # max(z,0) - z*t + log(1 + exp(-|z|))
    abs_z = T.relu(logits) + T.relu(-logits)
    return (T.relu(logits) - logits * t + T.log(T.exp(-abs_z) + 1.0)).mean()


def _batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train_classifier(
    net: Network,
    ds: LabeledDataset,
    epochs: int,
    lr: float,
    batch_size: int,
    rng,
) -> list[float]:
    """Minimize cross entropy with Adam; returns per-epoch mean losses."""
    if len(ds) == 0:
        raise ContractError("cannot train on an empty dataset")
    opt = Adam(net.params(), lr=lr)
    history = []
    for _ in range(epochs):
        total, count = 0.0, 0
        for idx in _batches(len(ds), batch_size, rng):
            with Tape():
                logits = net.logits(Tensor(ds.images[idx], requires_grad=False))
                loss = cross_entropy(logits, ds.labels[idx])
                opt.zero_grad()
                backward(loss)
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        history.append(total / count)
    return history


def predict_labels(net: Network, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        logits = net.logits(Tensor(images[i : i + batch_size], requires_grad=False))
        out.append(np.argmax(logits.data, axis=1))
    return np.concatenate(out) if out else np.array([], dtype=np.int64)


def accuracy(net: Network, ds: LabeledDataset) -> float:
    if len(ds) == 0:
        raise ContractError("accuracy of an empty dataset is undefined")
    return float(np.mean(predict_labels(net, ds.images) == ds.labels))


def train_discriminator(
    net: Network,
    benign: np.ndarray,
    adversarial: np.ndarray,
    epochs: int,
    lr: float,
    batch_size: int,
    rng,
) -> float:
    """Fit the sigmoid discriminator: benign -> 0, adversarial -> 1.

    Epochs run over class-balanced resamples (the pool is usually much smaller
    than the benign set); returns the balanced accuracy (mean of the per-class
    accuracies, so 0.5 is chance under any class ratio)."""
    if len(benign) == 0 or len(adversarial) == 0:
        raise ContractError("discriminator training needs both benign and adversarial items")
    images = np.concatenate([benign, adversarial])
    targets = np.concatenate([np.zeros(len(benign)), np.ones(len(adversarial))])
    opt = Adam(net.params(), lr=lr)
    side = max(len(benign), len(adversarial))
    for _ in range(epochs):
        b_idx = rng.choice(len(benign), size=side, replace=len(benign) < side)
        a_idx = rng.choice(len(adversarial), size=side, replace=len(adversarial) < side)
        epoch_x = np.concatenate([benign[b_idx], adversarial[a_idx]])
        epoch_y = np.concatenate([np.zeros(side), np.ones(side)])
        for idx in _batches(len(epoch_x), batch_size, rng):
            with Tape():
                logits = net.logits(Tensor(epoch_x[idx], requires_grad=False))
                loss = bce_with_logits(logits, epoch_y[idx])
                opt.zero_grad()
                backward(loss)
            opt.step()
    preds = []
    for i in range(0, len(images), 256):
        logits = net.logits(Tensor(images[i : i + 256], requires_grad=False))
        preds.append((logits.data[:, 0] > 0.0).astype(np.float64))
    hits = np.concatenate(preds) == targets
    return float(0.5 * (hits[targets == 0.0].mean() + hits[targets == 1.0].mean()))
