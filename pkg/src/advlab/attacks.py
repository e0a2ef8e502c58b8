"""Gradient-based attacks and their adaptation wrappers.

Four base attacks: fgsm/pgd/mim ascend a differentiable loss under an
L-infinity budget with box clipping to [0, 1]; cw_l2 descends a
distortion-plus-margin objective in tanh space with a binary search over the
margin coefficient. Two wrappers adapt any base attack: a discriminator term
(signed weight times the discriminator's sigmoid output) and a detector-bypass
hinge with a per-item binary search over its coefficient.

Budgets parse from the flat `key:value` abbreviation format
(e, i, ss, df, bs, lr, cf, ic; `bss` is accepted as an alias of ss).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericError, ParseError
from .tensor import Tape, Tensor, backward, frozen

# ---------------------------------------------------------------------------
# budgets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PerturbationBudget:
    norm_p: float = math.inf
    epsilon: float = 0.0
    step_size: float = 0.01
    iterations: int = 0
    decay: float = 0.0
    confidence: float = 0.0
    initial_coefficient: float = 1.0
    binary_search_steps: int = 0
    learning_rate: float = 0.01
    random_start: bool = False

    def __post_init__(self):
        if self.norm_p not in (0, 1, 2, math.inf):
            raise ContractError("norm_p must be one of 0, 1, 2, inf")
        checks = [
            (self.epsilon >= 0.0, "epsilon must be >= 0"),
            (self.step_size > 0.0, "step_size must be > 0"),
            (self.iterations >= 0, "iterations must be >= 0"),
            (self.decay >= 0.0, "decay must be >= 0"),
            (self.confidence >= 0.0, "confidence must be >= 0"),
            (self.initial_coefficient > 0.0, "initial_coefficient must be > 0"),
            (self.binary_search_steps >= 0, "binary_search_steps must be >= 0"),
            (self.learning_rate > 0.0, "learning_rate must be > 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ContractError(msg)
        for v in (self.epsilon, self.step_size, self.decay, self.confidence,
                  self.initial_coefficient, self.learning_rate):
            if not math.isfinite(v):
                raise ContractError("budget values must be finite")

    def with_epsilon(self, epsilon: float) -> "PerturbationBudget":
        return replace(self, epsilon=epsilon)


_BUDGET_KEYS = {
    "e": ("epsilon", float),
    "i": ("iterations", lambda v: int(float(v))),
    "ss": ("step_size", float),
    "bss": ("step_size", float),  # printed variant of ss in one config table
    "df": ("decay", float),
    "bs": ("binary_search_steps", lambda v: int(float(v))),
    "lr": ("learning_rate", float),
    "cf": ("confidence", float),
    "ic": ("initial_coefficient", float),
    "rs": ("random_start", lambda v: bool(int(v))),
}


def parse_budget(text: str, **overrides) -> PerturbationBudget:
    """Parse `e:0.3, i:90, ss:0.01`-style budget strings."""
    values: dict = {}
    offset = 0
    for chunk in text.split(","):
        stripped = chunk.strip()
        if not stripped:
            offset += len(chunk) + 1
            continue
        if ":" not in stripped:
            raise ParseError(f"expected key:value, got '{stripped}'", offset)
        key, _, raw = stripped.partition(":")
        key = key.strip()
        if key not in _BUDGET_KEYS:
            raise ParseError(f"unknown budget key '{key}'", offset + chunk.find(key))
        name, conv = _BUDGET_KEYS[key]
        try:
            values[name] = conv(raw.strip())
        except ValueError:
            raise ParseError(f"bad value for '{key}': '{raw.strip()}'", offset) from None
        offset += len(chunk) + 1
    values.update(overrides)
    return PerturbationBudget(**values)


# ---------------------------------------------------------------------------
# outcomes
# ---------------------------------------------------------------------------


@dataclass
class AttackOutcome:
    """One attacked input. linf is reported on the [0, 1] pixel scale and l2
    as 255 * ||delta||_2 / sqrt(d), both against the originating input."""

    x_a: np.ndarray
    y_pred: int
    true_label: int
    linf: float
    l2: float
    misled: bool
    bypassed_detector: bool = False
    converged: bool = True
    accepted_l2: tuple = ()


def _distortions(x0: np.ndarray, xa: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    delta = (xa - x0).reshape(len(x0), -1)
    linf = np.abs(delta).max(axis=1) if delta.size else np.zeros(len(x0))
    d = delta.shape[1] if delta.size else 1
    l2 = 255.0 * np.linalg.norm(delta, axis=1) / math.sqrt(d)
    return linf, l2


def _finalize(target, x0, xa, y, converged=None, accepted=None) -> list[AttackOutcome]:
    preds = target.predict(xa)
    linf, l2 = _distortions(x0, xa)
    out = []
    for i in range(len(x0)):
        out.append(
            AttackOutcome(
                x_a=xa[i].copy(),
                y_pred=int(preds[i]),
                true_label=int(y[i]),
                linf=float(linf[i]),
                l2=float(l2[i]),
                misled=bool(preds[i] != y[i]),
                converged=bool(converged[i]) if converged is not None else True,
                accepted_l2=tuple(accepted[i]) if accepted is not None else (),
            )
        )
    return out


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ContractError("attack inputs must be (C, H, W) or (N, C, H, W)")
    return x


def _per_item_extra(target, x_t):
    fn = getattr(target, "per_item_extra", None)
    return fn(x_t) if fn is not None else None


def _input_gradient(target, xt: np.ndarray, y: np.ndarray) -> np.ndarray:
    with Tape():
        x_t = Tensor(xt)
        loss = target.attack_loss(x_t, y)
        extra = _per_item_extra(target, x_t)
        if extra is not None:
            loss = loss + extra.sum()
        backward(loss)
    g = x_t.grad
    if g is None:
        return np.zeros_like(xt)
    if not np.isfinite(g).all():
        raise NumericError("non-finite attack gradient")
    return g


# ---------------------------------------------------------------------------
# the L-infinity ascent family
# ---------------------------------------------------------------------------


def _require_linf(budget):
    if budget.norm_p != math.inf:
        raise ContractError("this attack family requires an L-infinity budget")


def project_box(v: np.ndarray, x0: np.ndarray, epsilon: float) -> np.ndarray:
    """Coordinatewise projection onto [x0 - eps, x0 + eps] intersected with [0, 1]."""
    return np.clip(np.clip(v, x0 - epsilon, x0 + epsilon), 0.0, 1.0)


def fgsm(target, x, y, budget: PerturbationBudget, rng=None) -> list[AttackOutcome]:
    """Single signed-gradient step of size epsilon, box-clipped."""
    _require_linf(budget)
    x0 = _as_batch(x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    with frozen(target.frozen_tensors()):
        g = _input_gradient(target, x0.copy(), y)
        xa = np.clip(x0 + budget.epsilon * T.sign(g), 0.0, 1.0)
        return _finalize(target, x0, xa, y)


def pgd(target, x, y, budget: PerturbationBudget, rng=None) -> list[AttackOutcome]:
    """Iterated signed-gradient ascent projected onto the epsilon box, with an
    optional uniform random start."""
    _require_linf(budget)
    x0 = _as_batch(x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    xt = x0.copy()
    if budget.random_start:
        if rng is None:
            rng = np.random.default_rng(0)
        xt = np.clip(x0 + rng.uniform(-budget.epsilon, budget.epsilon, size=x0.shape), 0.0, 1.0)
    with frozen(target.frozen_tensors()):
        for _ in range(budget.iterations):
            g = _input_gradient(target, xt, y)
            xt = project_box(xt + budget.step_size * T.sign(g), x0, budget.epsilon)
        return _finalize(target, x0, xt, y)


def mim(target, x, y, budget: PerturbationBudget, rng=None) -> list[AttackOutcome]:
    """Momentum-accumulated signed ascent: g <- decay * g + grad / ||grad||_1.

    A zero-L1 gradient contributes nothing to the momentum for that step."""
    _require_linf(budget)
    x0 = _as_batch(x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    xt = x0.copy()
    momentum = np.zeros_like(x0)
    with frozen(target.frozen_tensors()):
        for _ in range(budget.iterations):
            g = _input_gradient(target, xt, y)
            l1 = np.abs(g).reshape(len(g), -1).sum(axis=1).reshape(-1, 1, 1, 1)
            scaled = np.divide(g, l1, out=np.zeros_like(g), where=l1 > 0.0)
            momentum = budget.decay * momentum + scaled
            xt = project_box(xt + budget.step_size * T.sign(momentum), x0, budget.epsilon)
        return _finalize(target, x0, xt, y)


# ---------------------------------------------------------------------------
# Carlini-Wagner L2
# ---------------------------------------------------------------------------


def misclassification_margin(logits, label: int, kappa: float = 0.0) -> float:
    """max(max_{i != label} Z_i - Z_label, -kappa): positive once some other
    logit dominates the labelled one, floored at -kappa."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    others = np.delete(z, label)
    return float(max(others.max() - z[label], -kappa))


def _margin_cols(z: Tensor, labels: np.ndarray, kappa: float, targeted: bool) -> Tensor:
    """Per-item hinge column used inside the CW objective.

    targeted: max(max_{i != t} Z_i - Z_t, -kappa), minimized to make label t win.
    untargeted: max(Z_t - max_{i != t} Z_i, -kappa), minimized to dethrone t.
    """
    n = z.shape[0]
    mask = np.zeros(z.shape)
    mask[np.arange(n), labels] = -1e30
    z_lab = T.gather_cols(z, labels)
    z_other = T.row_max(z + Tensor(mask, requires_grad=False))
    inner = (z_other - z_lab) if targeted else (z_lab - z_other)
    return T.relu(inner + kappa) + (-kappa)


def cw_l2(
    target,
    x,
    y,
    budget: PerturbationBudget,
    rng=None,
    target_labels=None,
) -> list[AttackOutcome]:
    """Distortion-minimizing attack in tanh space.

    Minimizes ||(tanh(w)+1)/2 - x||_2^2 + c * hinge by plain gradient descent
    over w, re-running for binary_search_steps rounds of a per-item search on
    c (halve on success, grow tenfold until an upper bound exists). The lowest
    distortion success per item is kept; with no success the closest-to-margin
    iterate is returned with converged=False.
    """
    x0 = _as_batch(x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    n = len(x0)
    img_shape = x0.shape[1:]
    d = int(np.prod(img_shape))
    flat0 = x0.reshape(n, d)
    targeted = target_labels is not None
    labels = np.atleast_1d(np.asarray(target_labels, dtype=np.int64)) if targeted else y

    w_init = np.arctanh(2.0 * np.clip(flat0, 1e-6, 1.0 - 1e-6) - 1.0)
    c = np.full(n, budget.initial_coefficient)
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    best_l2 = np.full(n, np.inf)
    best_x = x0.copy()
    got_success = np.zeros(n, dtype=bool)
    fallback_f = np.full(n, np.inf)
    fallback_x = x0.copy()
    accepted: list[list[float]] = [[] for _ in range(n)]
    rounds = max(1, budget.binary_search_steps)

    with frozen(target.frozen_tensors()):
        for _ in range(rounds):
            w = w_init.copy()
            round_success = np.zeros(n, dtype=bool)
            c_col = Tensor(c[:, None], requires_grad=False)
            for step in range(budget.iterations + 1):
                last = step == budget.iterations
                with Tape():
                    w_t = Tensor(w)
                    xp = (T.tanh(w_t) + 1.0) * 0.5
                    l2_col = T.square(xp - Tensor(flat0, requires_grad=False)).sum(
                        axis=1, keepdims=True
                    )
                    xp_img = xp.reshape((n,) + img_shape)
                    z = target.logits(xp_img)
                    f_col = _margin_cols(z, labels, budget.confidence, targeted)
                    obj_col = l2_col + c_col * f_col
                    extra = _per_item_extra(target, xp_img)
                    if extra is not None:
                        obj_col = obj_col + extra
                    if not last:
                        backward(obj_col.sum())
                preds = np.argmax(z.data, axis=1)
                success = (preds == labels) if targeted else (preds != y)
                cur_l2 = np.sqrt(l2_col.data[:, 0])
                improve = success & (cur_l2 < best_l2)
                if improve.any():
                    best_l2[improve] = cur_l2[improve]
                    best_x[improve] = xp.data[improve].reshape((-1,) + img_shape)
                fvals = f_col.data[:, 0]
                closer = ~success & (fvals < fallback_f)
                if closer.any():
                    fallback_f[closer] = fvals[closer]
                    fallback_x[closer] = xp.data[closer].reshape((-1,) + img_shape)
                round_success |= success
                got_success |= success
                if not last:
                    g = w_t.grad
                    if g is None:
                        break
                    if not np.isfinite(g).all():
                        raise NumericError("non-finite attack gradient")
                    w = w - budget.learning_rate * g
            hi = np.where(round_success, np.minimum(hi, c), hi)
            lo = np.where(round_success, lo, np.maximum(lo, c))
            for i in np.flatnonzero(round_success):
                accepted[i].append(float(best_l2[i]))
            c = np.where(np.isfinite(hi), 0.5 * (lo + hi), c * 10.0)

    xa = np.where(got_success[:, None, None, None], best_x, fallback_x)
    return _finalize(target, x0, xa, y, converged=got_success, accepted=accepted)


ATTACKS = {"fgsm": fgsm, "pgd": pgd, "mim": mim, "cw_l2": cw_l2}
ASCENT_ATTACKS = ("fgsm", "pgd", "mim")


# ---------------------------------------------------------------------------
# classifier target
# ---------------------------------------------------------------------------


class ClassifierTarget:
    """Attack surface of a softmax classifier: summed cross entropy to ascend,
    pre-softmax logits for margin objectives."""

    def __init__(self, net):
        self.net = net

    def attack_loss(self, x_t: Tensor, y: np.ndarray) -> Tensor:
        logits = self.net.logits(x_t)
        lse = T.logsumexp(logits)
        picked = T.gather_cols(logits, np.asarray(y, dtype=np.int64))
        return (lse - picked).sum()

    def logits(self, x_t: Tensor) -> Tensor:
        return self.net.logits(x_t)

    def predict(self, x_np: np.ndarray) -> np.ndarray:
        return np.argmax(self.net.logits(Tensor(x_np, requires_grad=False)).data, axis=1)

    def frozen_tensors(self):
        return list(self.net.params().values())


# ---------------------------------------------------------------------------
# adaptation wrappers
# ---------------------------------------------------------------------------


def detection_hinge(score: float, benign_mean: float) -> float:
    """max(0, score - benign_mean): zero once the detector score drops below
    the benign population mean."""
    return max(0.0, score - benign_mean)


class _ChainedExtraTarget:
    """Forward everything to a base target, adding a per-item loss column."""

    def __init__(self, base, term_fn):
        self._base = base
        self._term_fn = term_fn

    def attack_loss(self, x_t, y):
        return self._base.attack_loss(x_t, y)

    def logits(self, x_t):
        return self._base.logits(x_t)

    def predict(self, x_np):
        return self._base.predict(x_np)

    def frozen_tensors(self):
        return self._base.frozen_tensors()

    def per_item_extra(self, x_t):
        term = self._term_fn(x_t)
        inherited = _per_item_extra(self._base, x_t)
        return term if inherited is None else term + inherited


class DiscriminatorBypassTarget(_ChainedExtraTarget):
    """Adds weight * D(x) to the optimized objective; the sign of the weight
    matches the base attack's descent (+) or ascent (-) direction."""

    def __init__(self, base, discriminator, weight: float):
        self.discriminator = discriminator
        self.weight = float(weight)

        def term(x_t):
            prob = T.sigmoid(discriminator.logits(x_t))
            return prob * self.weight

        super().__init__(base, term)

    def frozen_tensors(self):
        return super().frozen_tensors() + list(self.discriminator.params().values())


def adapt_discriminator_bypass(attack, discriminator, weight: float):
    """Wrap an attack so every run optimizes `base loss + weight * D(x)`."""

    def adapted(target, x, y, budget, rng=None, **kwargs):
        wrapped = DiscriminatorBypassTarget(target, discriminator, weight)
        return attack(wrapped, x, y, budget, rng=rng, **kwargs)

    return adapted


class _DetectorHingeTarget(_ChainedExtraTarget):
    def __init__(self, base, detector, gammas: np.ndarray, sign: float):
        self.gammas = gammas  # mutable view; the search updates it between rounds

        def term(x_t):
            hinge = detector.pass_hinge(x_t)
            return hinge * Tensor(sign * self.gammas[:, None], requires_grad=False)

        super().__init__(base, term)


def adapt_detector_bypass(
    attack_name: str,
    target,
    detector,
    x,
    y,
    budget: PerturbationBudget,
    gamma0: float = 1.0,
    rng=None,
    target_labels=None,
) -> list[AttackOutcome]:
    """Run an attack with the detector-bypass hinge, searching its coefficient.

    The hinge enters with sign + for descent attacks (cw_l2) and - for ascent
    attacks. Per item: the coefficient doubles while the detector still fires
    and bisects once it is bypassed; the best bypassing iterate is kept
    (bypass first, then misclassification, then the lowest detector score).
    """
    if attack_name not in ATTACKS:
        raise ContractError(f"unknown attack '{attack_name}'")
    x0 = _as_batch(x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    n = len(x0)
    sign = 1.0 if attack_name == "cw_l2" else -1.0
    gammas = np.full(n, float(gamma0))
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    rounds = max(1, budget.binary_search_steps)
    adapted = _DetectorHingeTarget(target, detector, gammas, sign)

    best: list[AttackOutcome | None] = [None] * n
    best_q = [(-1, -1, -np.inf)] * n
    if rng is None:
        rng = np.random.default_rng(0)
    for _ in range(rounds):
        kwargs = {"target_labels": target_labels} if attack_name == "cw_l2" and target_labels is not None else {}
        outcomes = ATTACKS[attack_name](adapted, x0, y, budget, rng=rng, **kwargs)
        xa = np.stack([oc.x_a for oc in outcomes])
        scores = detector.vuln_scores(xa)
        bypassed = detector.bypassed(xa)
        for i, oc in enumerate(outcomes):
            oc.bypassed_detector = bool(bypassed[i])
            q = (int(bypassed[i]), int(oc.misled), -float(scores[i]))
            if q > best_q[i]:
                best_q[i] = q
                best[i] = oc
        hit = bypassed
        hi = np.where(hit, np.minimum(hi, gammas), hi)
        lo = np.where(hit, lo, np.maximum(lo, gammas))
        gammas[:] = np.where(np.isfinite(hi), 0.5 * (lo + hi), gammas * 2.0)
    return [oc for oc in best if oc is not None]
