"""Per-class dual-latent variational autoencoders and the minimax defense.

Each class owns a VAE whose encoder emits two latent heads: a robust head fit
to benign inputs of the class and a vulnerable head fit to adversarial inputs
crafted toward the class. Scores are mode-normalized Gaussian prior densities
of the evaluation-mode encoding mean, exp(-||mu||^2 / 2), in (0, 1]: the
robust scores drive classification (argmax over classes) and the vulnerable
score drives detection (large means adversarial).

Training alternates an adapted attack that hunts for inputs of other classes
that score well on the robust head while slipping under the vulnerable-score
baseline, and a defender step that fits the loss below on benign/adversarial
batch pairs:

    reconstruction(benign via robust route) + reconstruction(adv via
    vulnerable route) + kl_weight * (KL of both on-route heads) +
    penalty_weight * cross-route error penalty.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attacks import ATTACKS, PerturbationBudget, adapt_detector_bypass
from .data import LabeledDataset
from .errors import ContractError, FormatError
from .nets import Network, load_network, save_network
from .tensor import Tape, Tensor, backward
from .train import Adam

_DENSITY_CEILING = 1.0 - 1e-6


# ---------------------------------------------------------------------------
# loss building blocks
# ---------------------------------------------------------------------------


def kl_term(mu, logvar) -> Tensor:
    """Per-row Gaussian KL to the standard normal prior, always >= 0:
    -1/2 * sum_i (1 + log sigma_i^2 - mu_i^2 - sigma_i^2), as an (N, 1) column."""
    mu = mu if isinstance(mu, Tensor) else Tensor(np.atleast_2d(mu), requires_grad=False)
    logvar = logvar if isinstance(logvar, Tensor) else Tensor(np.atleast_2d(logvar), requires_grad=False)
    rows = (logvar + 1.0 - T.square(mu) - T.exp(logvar)).sum(axis=1, keepdims=True)
    return rows * -0.5


def prior_mode_score_rows(mu: Tensor) -> Tensor:
    """exp(-||mu||^2 / 2) per row: the prior density normalized to 1 at its mode."""
    return T.exp(T.square(mu).sum(axis=1, keepdims=True) * -0.5)


def prior_mode_score(mu: np.ndarray) -> np.ndarray:
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    return np.exp(-0.5 * np.square(mu).sum(axis=1))


def error_penalty_rows(mu_r_wrong, mu_v_wrong, penalty_weight: float) -> Tensor:
    """Cross-route penalty column: -beta * [log(1 - p_r(adv)) + log(1 - p_v(benign))]
    with each mode-normalized density clamped to at most 1 - 1e-6.

    Vanishes as the wrong-route encodings move far from the prior mode and
    saturates at -beta*ln(1e-6) per term at the mode."""
    mu_r_wrong = mu_r_wrong if isinstance(mu_r_wrong, Tensor) else Tensor(np.atleast_2d(mu_r_wrong), requires_grad=False)
    mu_v_wrong = mu_v_wrong if isinstance(mu_v_wrong, Tensor) else Tensor(np.atleast_2d(mu_v_wrong), requires_grad=False)
    p_r = T.clamp(prior_mode_score_rows(mu_r_wrong), hi=_DENSITY_CEILING)
    p_v = T.clamp(prior_mode_score_rows(mu_v_wrong), hi=_DENSITY_CEILING)
    total = T.log(1.0 - p_r) + T.log(1.0 - p_v)
    return total * -penalty_weight


# ---------------------------------------------------------------------------
# per-class VAE
# ---------------------------------------------------------------------------


@dataclass
class BenignBaseline:
    """Benign score statistics of one class, refreshed after every training
    round and required before any detection decision."""

    mean_v: float
    std_v: float
    mean_r: float
    std_r: float
    threshold_v: float  # detection quantile of the benign vulnerable scores
    count: int


class DualLatentVAE:
    """One class's encoder/decoder pair with loss weights and benign baseline."""

    def __init__(
        self,
        class_label: int,
        encoder: Network,
        decoder: Network,
        kl_weight: float = 1.0,
        penalty_weight: float = 100.0,
    ):
        if encoder.role != "encoder" or decoder.role != "decoder":
            raise ContractError("DualLatentVAE needs an encoder and a decoder network")
        dims = encoder.spec.latent_dims
        if dims is None:
            raise ContractError("encoder spec must end in z(r,v)")
        if dims[0] != dims[1]:
            raise ContractError(
                f"shared decoder requires equal latent widths, got z{dims}"
            )
        if decoder.input_shape != (dims[0],):
            raise ContractError(
                f"decoder input {decoder.input_shape} does not match latent width {dims[0]}"
            )
        if kl_weight <= 0.0 or penalty_weight <= 0.0:
            raise ContractError("loss weights must be positive")
        self.class_label = int(class_label)
        self.encoder = encoder
        self.decoder = decoder
        self.kl_weight = float(kl_weight)
        self.penalty_weight = float(penalty_weight)
        self.baseline: BenignBaseline | None = None

    # -- parameters -----------------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        out = {}
        for key, t in self.encoder.params().items():
            out[f"enc.{key}"] = t
        for key, t in self.decoder.params().items():
            out[f"dec.{key}"] = t
        return out

    # -- scores ---------------------------------------------------------------

    def heads(self, x):
        return self.encoder.run_heads(x)

    def score_r(self, x_np: np.ndarray) -> np.ndarray:
        return prior_mode_score(self.heads(np.asarray(x_np)).mu_r.data)

    def score_v(self, x_np: np.ndarray) -> np.ndarray:
        return prior_mode_score(self.heads(np.asarray(x_np)).mu_v.data)

    def robust_logit_col(self, x_t) -> Tensor:
        """(N, 1) column of -||mu_r||^2 / 2 = log robust score, on tape."""
        return T.square(self.heads(x_t).mu_r).sum(axis=1, keepdims=True) * -0.5

    def vuln_score_col(self, x_t) -> Tensor:
        return prior_mode_score_rows(self.heads(x_t).mu_v)

    # -- losses -----------------------------------------------------------------

    def _sample(self, mu, logvar, rng):
        if rng is None:
            return mu
        eps = Tensor(rng.standard_normal(mu.shape), requires_grad=False)
        return mu + T.exp(logvar * 0.5) * eps

    def loss(self, x_b: np.ndarray, x_a: np.ndarray, rng=None) -> Tensor:
        """The full training loss on a benign batch and an adversarial batch.

        With rng=None the latents are the head means (deterministic, used by
        gradient checks); otherwise the reconstruction routes are sampled by
        reparameterization."""
        x_b = np.asarray(x_b, dtype=np.float64)
        x_a = np.asarray(x_a, dtype=np.float64)
        if len(x_b) == 0 or len(x_a) == 0:
            raise ContractError("loss requires nonempty benign and adversarial batches")
        xb_t = Tensor(x_b, requires_grad=False)
        xa_t = Tensor(x_a, requires_grad=False)
        head_b = self.heads(xb_t)
        head_a = self.heads(xa_t)
        z_rb = self._sample(head_b.mu_r, head_b.logvar_r, rng)
        z_va = self._sample(head_a.mu_v, head_a.logvar_v, rng)
        recon_b = T.square(self.decoder.forward(z_rb) - xb_t).mean()
        recon_a = T.square(self.decoder.forward(z_va) - xa_t).mean()
        kl = kl_term(head_b.mu_r, head_b.logvar_r).mean() + kl_term(head_a.mu_v, head_a.logvar_v).mean()
        penalty = error_penalty_rows(head_a.mu_r, head_b.mu_v, self.penalty_weight).mean()
        return recon_b + recon_a + self.kl_weight * kl + penalty

    def benign_loss(self, x_b: np.ndarray, rng=None) -> Tensor:
        """The benign-only terms of the full loss, used to warm up before any
        adversarial data exists: robust-route reconstruction, its KL, and the
        penalty keeping benign inputs away from the vulnerable-head mode."""
        x_b = np.asarray(x_b, dtype=np.float64)
        if len(x_b) == 0:
            raise ContractError("benign_loss requires a nonempty batch")
        xb_t = Tensor(x_b, requires_grad=False)
        head_b = self.heads(xb_t)
        z_rb = self._sample(head_b.mu_r, head_b.logvar_r, rng)
        recon = T.square(self.decoder.forward(z_rb) - xb_t).mean()
        p_v = T.clamp(prior_mode_score_rows(head_b.mu_v), hi=_DENSITY_CEILING)
        penalty = T.log(1.0 - p_v).mean() * -self.penalty_weight
        return recon + self.kl_weight * kl_term(head_b.mu_r, head_b.logvar_r).mean() + penalty

    def error_penalty(self, x_b: np.ndarray, x_a: np.ndarray) -> float:
        """Mean cross-route penalty of paired batches (evaluation mode)."""
        head_b = self.heads(np.asarray(x_b))
        head_a = self.heads(np.asarray(x_a))
        return error_penalty_rows(head_a.mu_r, head_b.mu_v, self.penalty_weight).mean().item()

    # -- baseline ----------------------------------------------------------------

    def refresh_baseline(self, benign_images: np.ndarray, detection_quantile: float) -> BenignBaseline:
        if len(benign_images) == 0:
            raise ContractError("baseline refresh needs benign inputs")
        head = self.heads(np.asarray(benign_images))
        scores_v = prior_mode_score(head.mu_v.data)
        scores_r = prior_mode_score(head.mu_r.data)
        self.baseline = BenignBaseline(
            mean_v=float(scores_v.mean()),
            std_v=float(scores_v.std()),
            mean_r=float(scores_r.mean()),
            std_r=float(scores_r.std()),
            threshold_v=float(np.quantile(scores_v, detection_quantile)),
            count=len(benign_images),
        )
        return self.baseline


# ---------------------------------------------------------------------------
# ensemble
# ---------------------------------------------------------------------------


class DetectorEnsemble:
    """One DualLatentVAE per class plus the detection quantile."""

    def __init__(self, vaes: list[DualLatentVAE], detection_quantile: float = 0.95):
        if not vaes:
            raise ContractError("ensemble needs at least one VAE")
        labels = [v.class_label for v in vaes]
        if labels != list(range(len(vaes))):
            raise ContractError("ensemble needs exactly one VAE per label 0..N-1, in order")
        if not 0.0 < detection_quantile < 1.0:
            raise ContractError("detection_quantile must lie in (0, 1)")
        self.vaes = list(vaes)
        self.detection_quantile = float(detection_quantile)

    @property
    def num_classes(self) -> int:
        return len(self.vaes)

    def params(self) -> list[Tensor]:
        out = []
        for vae in self.vaes:
            out.extend(vae.params().values())
        return out

    # -- scoring -----------------------------------------------------------------

    def robust_scores(self, x_np: np.ndarray) -> np.ndarray:
        return np.stack([vae.score_r(x_np) for vae in self.vaes], axis=1)

    def classify(self, x_np: np.ndarray) -> np.ndarray:
        """argmax of the robust scores; ties resolve to the lowest label."""
        return np.argmax(self.robust_scores(x_np), axis=1)

    def vuln_scores_at(self, x_np: np.ndarray, labels: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        cols = np.stack([vae.score_v(x_np) for vae in self.vaes], axis=1)
        return cols[np.arange(len(cols)), labels]

    def require_baselines(self):
        for vae in self.vaes:
            if vae.baseline is None:
                raise ContractError(f"class {vae.class_label} has no benign baseline")

    def detect(self, x_np: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vulnerable score at the predicted class and the over-quantile flag.

        The raw score is always returned so AUC evaluation stays
        threshold-free; the flag compares against the per-class detection
        quantile of the benign score distribution."""
        self.require_baselines()
        labels = self.classify(x_np)
        scores = self.vuln_scores_at(x_np, labels)
        thresholds = np.array([self.vaes[c].baseline.threshold_v for c in labels])
        return scores, scores > thresholds

    def benign_means(self) -> tuple[np.ndarray, np.ndarray]:
        self.require_baselines()
        mean_v = np.array([v.baseline.mean_v for v in self.vaes])
        mean_r = np.array([v.baseline.mean_r for v in self.vaes])
        return mean_v, mean_r

    def robust_logit_matrix(self, x_t) -> Tensor:
        """(N, C) tape tensor of per-class log robust scores."""
        return T.stack_cols([vae.robust_logit_col(x_t) for vae in self.vaes])

    # -- persistence ----------------------------------------------------------------

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        manifest = {
            "schema": "advlab-ensemble/1",
            "classes": self.num_classes,
            "detection_quantile": self.detection_quantile,
            "kl_weight": self.vaes[0].kl_weight,
            "penalty_weight": self.vaes[0].penalty_weight,
            "baselines": [
                None if v.baseline is None else vars(v.baseline) for v in self.vaes
            ],
        }
        with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        for vae in self.vaes:
            save_network(vae.encoder, os.path.join(directory, f"class{vae.class_label}_encoder.nkpt"))
            save_network(vae.decoder, os.path.join(directory, f"class{vae.class_label}_decoder.nkpt"))

    @classmethod
    def load(cls, directory) -> "DetectorEnsemble":
        path = os.path.join(directory, "manifest.json")
        try:
            with open(path, "r", encoding="utf-8") as fh:
                manifest = json.load(fh)
        except FileNotFoundError as exc:
            raise FormatError(f"{directory}: not an ensemble checkpoint") from exc
        if manifest.get("schema") != "advlab-ensemble/1":
            raise FormatError(f"{path}: unknown schema {manifest.get('schema')!r}")
        vaes = []
        for c in range(int(manifest["classes"])):
            encoder = load_network(os.path.join(directory, f"class{c}_encoder.nkpt"))
            decoder = load_network(os.path.join(directory, f"class{c}_decoder.nkpt"))
            vae = DualLatentVAE(
                c,
                encoder,
                decoder,
                kl_weight=manifest["kl_weight"],
                penalty_weight=manifest["penalty_weight"],
            )
            raw = manifest["baselines"][c]
            if raw is not None:
                vae.baseline = BenignBaseline(**raw)
            vaes.append(vae)
        return cls(vaes, detection_quantile=manifest["detection_quantile"])


def build_ensemble(
    num_classes: int,
    encoder_arch: str,
    decoder_arch: str,
    input_shape,
    rng,
    kl_weight: float = 1.0,
    penalty_weight: float = 100.0,
    detection_quantile: float = 0.95,
    ct_stride: int = 1,
) -> DetectorEnsemble:
    vaes = []
    for c in range(num_classes):
        encoder = Network(encoder_arch, input_shape, role="encoder", rng=rng)
        latent = encoder.spec.latent_dims[0]
        decoder = Network(
            decoder_arch,
            (latent,),
            role="decoder",
            rng=rng,
            ct_stride=ct_stride,
            output_shape=input_shape,
        )
        vaes.append(DualLatentVAE(c, encoder, decoder, kl_weight, penalty_weight))
    return DetectorEnsemble(vaes, detection_quantile)


# ---------------------------------------------------------------------------
# attack surfaces over the defense
# ---------------------------------------------------------------------------


class VaeClassAscentTarget:
    """Attack surface for crafting inputs toward one class: ascend that class's
    log robust score. Predictions come from the full ensemble."""

    def __init__(self, ensemble: DetectorEnsemble, class_label: int):
        self.ensemble = ensemble
        self.vae = ensemble.vaes[class_label]
        self.class_label = class_label

    def attack_loss(self, x_t, y):
        return self.vae.robust_logit_col(x_t).sum()

    def logits(self, x_t):
        return self.ensemble.robust_logit_matrix(x_t)

    def predict(self, x_np):
        return self.ensemble.classify(x_np)

    def frozen_tensors(self):
        return self.ensemble.params()


class EnsembleMarginTarget:
    """Untargeted attack surface over the whole defense: ascend the margin of
    the best wrong class over the true class in log robust score."""

    def __init__(self, ensemble: DetectorEnsemble):
        self.ensemble = ensemble

    def attack_loss(self, x_t, y):
        z = self.ensemble.robust_logit_matrix(x_t)
        y = np.asarray(y, dtype=np.int64)
        mask = np.zeros(z.shape)
        mask[np.arange(len(y)), y] = -1e30
        z_other = T.row_max(z + Tensor(mask, requires_grad=False))
        return (z_other - T.gather_cols(z, y)).sum()

    def logits(self, x_t):
        return self.ensemble.robust_logit_matrix(x_t)

    def predict(self, x_np):
        return self.ensemble.classify(x_np)

    def frozen_tensors(self):
        return self.ensemble.params()


class EnsembleTowardClassTarget:
    """Whitebox attack surface that morphs each input toward a fixed wrong
    class by ascending that class's log robust score (the minimax adversary's
    objective); success is still judged untargeted."""

    def __init__(self, ensemble: DetectorEnsemble, targets: np.ndarray):
        self.ensemble = ensemble
        self.targets = np.asarray(targets, dtype=np.int64)

    @classmethod
    def toward_most_susceptible(cls, ensemble, x, y) -> "EnsembleTowardClassTarget":
        """Target each input's highest-scoring wrong class on the clean input."""
        scores = ensemble.robust_scores(np.asarray(x))
        y = np.asarray(y, dtype=np.int64)
        scores[np.arange(len(y)), y] = -np.inf
        return cls(ensemble, np.argmax(scores, axis=1))

    def attack_loss(self, x_t, y):
        z = self.ensemble.robust_logit_matrix(x_t)
        return T.gather_cols(z, self.targets).sum()

    def logits(self, x_t):
        return self.ensemble.robust_logit_matrix(x_t)

    def predict(self, x_np):
        return self.ensemble.classify(x_np)

    def frozen_tensors(self):
        return self.ensemble.params()


class SingleVaeDetector:
    """Detector view of one class's VAE for bypass-adapted attacks."""

    def __init__(self, vae: DualLatentVAE):
        if vae.baseline is None:
            raise ContractError("detector requires a populated benign baseline")
        self.vae = vae

    def pass_hinge(self, x_t) -> Tensor:
        score = self.vae.vuln_score_col(x_t)
        return T.relu(score + (-self.vae.baseline.mean_v))

    def vuln_scores(self, x_np) -> np.ndarray:
        return self.vae.score_v(x_np)

    def bypassed(self, x_np) -> np.ndarray:
        return self.vuln_scores(x_np) < self.vae.baseline.mean_v


class EnsembleDetector:
    """Detector view of the whole defense: the hinge applies to the vulnerable
    score of each item's currently predicted class."""

    def __init__(self, ensemble: DetectorEnsemble):
        ensemble.require_baselines()
        self.ensemble = ensemble

    def pass_hinge(self, x_t) -> Tensor:
        z = self.ensemble.robust_logit_matrix(x_t)
        labels = np.argmax(z.data, axis=1)
        cols = T.stack_cols([vae.vuln_score_col(x_t) for vae in self.ensemble.vaes])
        score = T.gather_cols(cols, labels)
        means = np.array([self.ensemble.vaes[c].baseline.mean_v for c in labels])[:, None]
        return T.relu(score - Tensor(means, requires_grad=False))

    def vuln_scores(self, x_np) -> np.ndarray:
        scores, _ = self.ensemble.detect(x_np)
        return scores

    def bypassed(self, x_np) -> np.ndarray:
        labels = self.ensemble.classify(x_np)
        scores = self.ensemble.vuln_scores_at(x_np, labels)
        means = np.array([self.ensemble.vaes[c].baseline.mean_v for c in labels])
        return scores < means


# ---------------------------------------------------------------------------
# vulnerable pool
# ---------------------------------------------------------------------------


class VulnerablePool:
    """Per-class accumulated adversarial inputs. Monotone under union and
    guaranteed disjoint from the class's own benign set."""

    def __init__(self, num_classes: int):
        self.items: list[np.ndarray | None] = [None] * num_classes
        self._benign_hashes: list[set] = [set() for _ in range(num_classes)]

    def guard_class(self, class_label: int, benign_images: np.ndarray):
        self._benign_hashes[class_label] = {img.tobytes() for img in benign_images}

    def add(self, class_label: int, images: np.ndarray) -> int:
        if len(images) == 0:
            return self.size(class_label)
        hashes = self._benign_hashes[class_label]
        for img in images:
            if img.tobytes() in hashes:
                raise ContractError(
                    f"class {class_label}: pool insertion includes a benign input of the class"
                )
        cur = self.items[class_label]
        self.items[class_label] = images.copy() if cur is None else np.concatenate([cur, images])
        return self.size(class_label)

    def size(self, class_label: int) -> int:
        cur = self.items[class_label]
        return 0 if cur is None else len(cur)

    def get(self, class_label: int) -> np.ndarray:
        cur = self.items[class_label]
        if cur is None:
            raise ContractError(f"class {class_label}: empty vulnerable pool")
        return cur

    def sizes(self) -> list[int]:
        return [self.size(c) for c in range(len(self.items))]


# ---------------------------------------------------------------------------
# minimax training (alternating attack / defense, per class)
# ---------------------------------------------------------------------------


@dataclass
class MinimaxResult:
    ensemble: DetectorEnsemble
    pool: VulnerablePool
    converged: list[bool]
    history: list[list[dict]] = field(default_factory=list)


def train_minimax(
    ensemble: DetectorEnsemble,
    benign: LabeledDataset,
    attack_name: str,
    budget: PerturbationBudget,
    *,
    gamma0: float = 1.0,
    rounds: int = 8,
    warmup_epochs: int = 30,
    defender_epochs: int = 5,
    consolidation_epochs: int = 0,
    probe_size: int = 96,
    batch_size: int = 32,
    lr: float = 1e-3,
    bypass_threshold: float = 0.01,
    min_pool_size: int = 0,
    rng=None,
) -> MinimaxResult:
    """Alternating game per class: attack other-class inputs toward the class,
    pool the detector-bypassing successes, then refit the VAE on benign/pool
    batches; stop when the bypass rate of a fresh probe drops below the
    threshold (after at least one defender update) or the round limit is hit.

    A bypassing success scores below the class's benign vulnerable-score mean.
    Only inputs whose labels differ from the class are ever attacked, and pool
    insertion re-checks that no benign input of the class slips in.

    consolidation_epochs gives the defender a final uncontested fit over the
    accumulated pool once the game has stopped; the attacker has already lost
    at that point, and the extra epochs restore the benign-score equilibrium
    after the last penalty shock. min_pool_size keeps the game open (probe
    estimates are noisy at desk scale) until the class has accumulated at
    least that many adversarial inputs or the round limit is hit."""
    if attack_name not in ATTACKS:
        raise ContractError(f"unknown attack '{attack_name}'")
    if len(benign) == 0:
        raise ContractError("train_minimax requires a nonempty benign dataset")
    if benign.num_classes < 2:
        raise ContractError("train_minimax requires at least two classes")
    if benign.num_classes != ensemble.num_classes:
        raise ContractError("ensemble and dataset class counts disagree")
    if rng is None:
        rng = np.random.default_rng(0)

    pool = VulnerablePool(ensemble.num_classes)
    converged = [False] * ensemble.num_classes
    history: list[list[dict]] = []

    for c, vae in enumerate(ensemble.vaes):
        x_own = benign.of_class(c)
        if len(x_own) == 0:
            raise ContractError(f"class {c} has no benign inputs")
        pool.guard_class(c, x_own)
        others_mask = benign.labels != c
        x_others = benign.images[others_mask]
        y_others = benign.labels[others_mask]

        opt = Adam(vae.params(), lr=lr)
        _fit_benign_only(vae, x_own, opt, warmup_epochs, batch_size, rng)
        vae.refresh_baseline(x_own, ensemble.detection_quantile)

        class_log: list[dict] = []
        for round_idx in range(rounds):
            probe_idx = rng.choice(len(x_others), size=min(probe_size, len(x_others)), replace=False)
            probe_x = x_others[probe_idx]
            probe_y = y_others[probe_idx]
            assert np.all(probe_y != c), "attack probes must exclude the class's own inputs"

            target = VaeClassAscentTarget(ensemble, c)
            detector = SingleVaeDetector(vae)
            kwargs = {"target_labels": np.full(len(probe_x), c)} if attack_name == "cw_l2" else {}
            outcomes = adapt_detector_bypass(
                attack_name, target, detector, probe_x, probe_y, budget,
                gamma0=gamma0, rng=np.random.default_rng(rng.integers(2**63)), **kwargs
            )
            xa = np.stack([oc.x_a for oc in outcomes])
            success = vae.score_v(xa) < vae.baseline.mean_v
            bypass_rate = float(success.mean())
            if success.any():
                pool.add(c, xa[success])
            class_log.append({"round": round_idx, "bypass_rate": bypass_rate, "pool": pool.size(c)})
            if bypass_rate < bypass_threshold and round_idx > 0 and pool.size(c) >= min_pool_size:
                converged[c] = True
                break
            if pool.size(c):
                _fit_defender(vae, x_own, pool.get(c), opt, defender_epochs, batch_size, rng)
            else:
                _fit_benign_only(vae, x_own, opt, defender_epochs, batch_size, rng)
            vae.refresh_baseline(x_own, ensemble.detection_quantile)
        if consolidation_epochs:
            if pool.size(c):
                _fit_defender(vae, x_own, pool.get(c), opt, consolidation_epochs, batch_size, rng)
            else:
                _fit_benign_only(vae, x_own, opt, consolidation_epochs, batch_size, rng)
            vae.refresh_baseline(x_own, ensemble.detection_quantile)
        history.append(class_log)
    return MinimaxResult(ensemble, pool, converged, history)


def _fit_benign_only(vae, x_own, opt, epochs, batch_size, rng):
    for _ in range(epochs):
        order = rng.permutation(len(x_own))
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            with Tape():
                loss = vae.benign_loss(x_own[idx], rng=rng)
                opt.zero_grad()
                backward(loss)
            opt.step()


def _fit_defender(vae, x_own, x_pool, opt, epochs, batch_size, rng):
    for _ in range(epochs):
        order = rng.permutation(len(x_own))
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            adv_idx = rng.choice(len(x_pool), size=len(idx), replace=len(x_pool) < len(idx))
            with Tape():
                loss = vae.loss(x_own[idx], x_pool[adv_idx], rng=rng)
                opt.zero_grad()
                backward(loss)
            opt.step()


# ---------------------------------------------------------------------------
# latent export (feeds external 2-D embedding / plotting)
# ---------------------------------------------------------------------------


def export_latents(ensemble: DetectorEnsemble, benign: LabeledDataset, pool: VulnerablePool | None, path) -> int:
    """CSV rows of evaluation-mode latent means: class, route, source, z...."""
    rows = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        r_dim = ensemble.vaes[0].encoder.spec.latent_dims[0]
        writer.writerow(["class", "route", "source"] + [f"z{i}" for i in range(r_dim)])
        for c, vae in enumerate(ensemble.vaes):
            groups = [("benign", benign.of_class(c))]
            if pool is not None and pool.size(c):
                groups.append(("adversarial", pool.get(c)))
            for source, images in groups:
                if len(images) == 0:
                    continue
                head = vae.heads(images)
                for route, mu in (("r", head.mu_r.data), ("v", head.mu_v.data)):
                    for row in mu:
                        writer.writerow([c, route, source] + [repr(float(v)) for v in row])
                        rows += 1
    return rows
