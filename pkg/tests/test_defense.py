import math

import numpy as np
import pytest

from advlab import ContractError, Tape, Tensor, backward
from advlab.attacks import PerturbationBudget
from advlab.data import synth_blobs
from advlab.defense import (
    BenignBaseline,
    DetectorEnsemble,
    DualLatentVAE,
    EnsembleDetector,
    EnsembleMarginTarget,
    VulnerablePool,
    build_ensemble,
    error_penalty_rows,
    export_latents,
    kl_term,
    prior_mode_score,
    train_minimax,
)
from advlab.nets import Network

from oracles import central_diff, grad_close


def _toy_vae(seed=0, pixels=(1, 2, 2), latent=4):
    rng = np.random.default_rng(seed)
    enc = Network(f"z({latent},{latent})", pixels, role="encoder", rng=rng)
    dec = Network(f"d({int(np.prod(pixels))})", (latent,), role="decoder", rng=rng, output_shape=pixels)
    return DualLatentVAE(0, enc, dec)


# -- scores ---------------------------------------------------------------------


def test_prior_mode_score_closed_forms():
    assert prior_mode_score(np.zeros((1, 4)))[0] == 1.0
    assert abs(prior_mode_score(np.array([[1.0, 1.0]]))[0] - math.exp(-1.0)) < 1e-15


def test_prior_mode_score_monotone_in_norm():
    norms = np.linspace(0.0, 5.0, 20)
    scores = [prior_mode_score(np.array([[n, 0.0]]))[0] for n in norms]
    assert all(a > b for a, b in zip(scores, scores[1:]))


# -- kl -----------------------------------------------------------------------


def test_kl_closed_forms_exact():
    assert abs(kl_term(np.array([[0.0]]), np.array([[0.0]])).item()) < 1e-12
    assert abs(kl_term(np.array([[1.0]]), np.array([[0.0]])).item() - 0.5) < 1e-12
    expected = 0.5 * (1.0 - math.log(2.0))
    assert abs(kl_term(np.array([[0.0]]), np.array([[math.log(2.0)]])).item() - expected) < 1e-12


def test_kl_nonnegative_property():
    rng = np.random.default_rng(0)
    mu = rng.normal(size=(200, 3))
    logvar = rng.normal(size=(200, 3))
    vals = kl_term(mu, logvar).data
    assert np.all(vals >= -1e-12)


# -- error penalty ---------------------------------------------------------------


def test_error_penalty_far_from_mode_vanishes():
    beta = 100.0
    far = np.full((1, 4), math.sqrt(10.0))  # ||mu||^2 = 40
    total = error_penalty_rows(far, far, beta).item()
    p = math.exp(-20.0)
    assert abs(total - 2.0 * beta * -math.log1p(-p)) < 1e-12
    assert total < 1e-6
    assert total >= 0.0


def test_error_penalty_clamps_at_mode():
    beta = 100.0
    at_mode = np.zeros((1, 4))
    far = np.full((1, 4), 10.0)
    total = error_penalty_rows(at_mode, far, beta).item()
    assert abs(total - (-beta) * math.log(1e-6)) < 1e-6
    both = error_penalty_rows(at_mode, at_mode, beta).item()
    assert abs(both - 2.0 * (-beta) * math.log(1e-6)) < 1e-6


def test_error_penalty_vanishes_with_distance_property():
    beta = 7.0
    totals = [
        error_penalty_rows(np.full((1, 2), r), np.full((1, 2), r), beta).item()
        for r in (1.0, 2.0, 4.0, 8.0)
    ]
    assert all(a > b for a, b in zip(totals, totals[1:]))
    assert totals[-1] < 1e-10


# -- loss -----------------------------------------------------------------------


def test_loss_termwise_minimum_near_zero():
    vae = _toy_vae(pixels=(1, 1, 2), latent=2)
    # zero decoder: output is sigmoid(0) = 0.5 everywhere
    for p in vae.decoder.params().values():
        p.data[...] = 0.0
    x_b = np.full((1, 1, 1, 2), 0.5)
    x_a = np.full((1, 1, 1, 2), 0.5)
    x_b[0, 0, 0, 0] += 1e-4
    x_a[0, 0, 0, 0] -= 1e-4
    big = 1e6
    params = vae.encoder.params()
    for name, p in params.items():
        if "logvar" in name:
            p.data[...] = 0.0  # sigma = 1 on both heads
        elif name.endswith("mu_r.weight"):
            p.data[...] = 0.0
            p.data[0, 0] = big
        elif name.endswith("mu_r.bias"):
            p.data[...] = 0.0
            p.data[0] = -big * x_b[0, 0, 0, 0]  # mu_r(x_b) = 0, mu_r(x_a) far
        elif name.endswith("mu_v.weight"):
            p.data[...] = 0.0
            p.data[0, 0] = big
        elif name.endswith("mu_v.bias"):
            p.data[...] = 0.0
            p.data[0] = -big * x_a[0, 0, 0, 0]  # mu_v(x_a) = 0, mu_v(x_b) far
    loss = vae.loss(x_b, x_a).item()
    assert loss < 1e-6


def test_loss_defaults_match_reported_weights():
    vae = _toy_vae()
    assert vae.kl_weight == 1.0
    assert vae.penalty_weight == 100.0


def test_loss_empty_batch_contract():
    vae = _toy_vae()
    with pytest.raises(ContractError):
        vae.loss(np.zeros((0, 1, 2, 2)), np.zeros((1, 1, 2, 2)))


def test_loss_gradient_matches_fd_on_two_pixel_vae():
    vae = _toy_vae(seed=3, pixels=(1, 1, 2), latent=2)
    rng = np.random.default_rng(4)
    for name, p in vae.params().items():
        if name.endswith("bias"):
            p.data[...] = rng.normal(0.0, 0.05, size=p.shape)
    x_b = rng.uniform(0.2, 0.8, size=(2, 1, 1, 2))
    x_a = rng.uniform(0.2, 0.8, size=(2, 1, 1, 2))

    params = vae.params()
    with Tape():
        backward(vae.loss(x_b, x_a))
    for name, p in params.items():
        ag = p.grad if p.grad is not None else np.zeros_like(p.data)

        def f(w, p=p):
            saved = p.data.copy()
            p.data = w
            try:
                return vae.loss(x_b, x_a).item()
            finally:
                p.data = saved

        assert grad_close(ag, central_diff(f, p.data.copy())), name
        p.zero_grad()


def test_vae_requires_equal_latent_widths():
    rng = np.random.default_rng(0)
    enc = Network("z(3,5)", (1, 2, 2), role="encoder", rng=rng)
    dec = Network("d(4)", (3,), role="decoder", rng=rng, output_shape=(1, 2, 2))
    with pytest.raises(ContractError, match="equal latent widths"):
        DualLatentVAE(0, enc, dec)


# -- classify / detect ------------------------------------------------------------


def _scored_ensemble(scores_by_class):
    """Ensemble stub via engineered encoders producing fixed robust scores."""

    class FakeVae(DualLatentVAE):
        def __init__(self, c, score):
            self._score = score
            self.class_label = c
            self.baseline = None

        def score_r(self, x_np):
            return np.full(len(x_np), self._score)

        def score_v(self, x_np):
            return np.full(len(x_np), 0.5)

    vaes = [FakeVae(c, s) for c, s in enumerate(scores_by_class)]
    ens = DetectorEnsemble.__new__(DetectorEnsemble)
    ens.vaes = vaes
    ens.detection_quantile = 0.95
    return ens


def test_classify_argmax_and_ties():
    ens = _scored_ensemble([0.9, 0.1])
    assert list(ens.classify(np.zeros((3, 1, 2, 2)))) == [0, 0, 0]
    ens = _scored_ensemble([0.4, 0.4, 0.4])
    assert list(ens.classify(np.zeros((2, 1, 2, 2)))) == [0, 0]  # lowest label wins


def test_classify_invariant_under_increasing_transform():
    rng = np.random.default_rng(1)
    ds = synth_blobs(3, 10, (2, 2), seed=2)
    ens = build_ensemble(3, "z(3,3)", "d(4)", (1, 2, 2), np.random.default_rng(3))
    scores = ens.robust_scores(ds.images)
    labels = ens.classify(ds.images)
    for transform in (np.log, np.sqrt, lambda s: 3.0 * s + 1.0):
        assert np.array_equal(np.argmax(transform(scores), axis=1), labels)


def test_detect_quantile_flag_rate_and_raw_scores():
    ds = synth_blobs(1, 200, (2, 2), seed=5)
    ens = build_ensemble(1, "z(3,3)", "d(4)", (1, 2, 2), np.random.default_rng(6),
                         detection_quantile=0.9)
    ens.vaes[0].refresh_baseline(ds.images, ens.detection_quantile)
    scores, flags = ens.detect(ds.images)
    rate = flags.mean()
    assert abs(rate - 0.1) <= 0.05
    # below the benign minimum can never be flagged
    assert not flags[np.argmin(scores)]
    assert np.all(scores > 0.0)


def test_detect_without_baseline_contract():
    ens = build_ensemble(1, "z(3,3)", "d(4)", (1, 2, 2), np.random.default_rng(0))
    with pytest.raises(ContractError, match="baseline"):
        ens.detect(np.zeros((2, 1, 2, 2)))


# -- pool --------------------------------------------------------------------------


def test_pool_monotone_and_disjoint():
    pool = VulnerablePool(2)
    benign = np.random.default_rng(0).uniform(size=(4, 1, 2, 2))
    pool.guard_class(0, benign)
    a = np.random.default_rng(1).uniform(size=(3, 1, 2, 2))
    assert pool.add(0, a) == 3
    assert pool.add(0, a[:1]) == 4  # duplicates of adversarial content are fine
    with pytest.raises(ContractError, match="benign"):
        pool.add(0, benign[2:3])
    assert pool.size(0) == 4  # failed insert does not shrink or grow the pool


# -- minimax training -----------------------------------------------------------


def _desk_setup(num_classes=2, seed=0):
    ds = synth_blobs(num_classes, 40, (2, 2), seed=seed)
    ens = build_ensemble(num_classes, "z(4,4)", "d(6) d(4)", (1, 2, 2),
                         np.random.default_rng(seed + 1))
    return ds, ens


def test_train_minimax_contract_errors():
    ds, ens = _desk_setup()
    budget = PerturbationBudget(epsilon=0.3, step_size=0.1, iterations=3)
    empty = synth_blobs(2, 1, (2, 2), seed=0).take(np.array([], dtype=np.int64))
    with pytest.raises(ContractError):
        train_minimax(ens, empty, "mim", budget)
    single = synth_blobs(1, 10, (2, 2), seed=0)
    with pytest.raises(ContractError):
        train_minimax(ens, single, "mim", budget)


def test_train_minimax_pool_monotone_and_baselines():
    ds, ens = _desk_setup()
    budget = PerturbationBudget(epsilon=0.4, step_size=0.1, iterations=6, decay=0.9,
                                binary_search_steps=2)
    result = train_minimax(
        ens, ds, "mim", budget,
        rounds=3, warmup_epochs=6, defender_epochs=2, probe_size=24,
        batch_size=16, rng=np.random.default_rng(7),
    )
    for class_log in result.history:
        sizes = [entry["pool"] for entry in class_log]
        assert sizes == sorted(sizes)
    for vae in ens.vaes:
        assert vae.baseline is not None and vae.baseline.count > 0
    assert len(result.converged) == 2


def test_ensemble_roundtrip(tmp_path):
    ds, ens = _desk_setup()
    for c, vae in enumerate(ens.vaes):
        vae.refresh_baseline(ds.of_class(c), ens.detection_quantile)
    x = ds.images[:5]
    before_scores, before_flags = ens.detect(x)
    ens.save(tmp_path / "ens")
    loaded = DetectorEnsemble.load(tmp_path / "ens")
    after_scores, after_flags = loaded.detect(x)
    assert np.array_equal(before_scores, after_scores)
    assert np.array_equal(before_flags, after_flags)
    assert loaded.detection_quantile == ens.detection_quantile


def test_export_latents_csv(tmp_path):
    ds, ens = _desk_setup()
    pool = VulnerablePool(2)
    pool.add(0, np.random.default_rng(0).uniform(size=(3, 1, 2, 2)))
    path = tmp_path / "latents.csv"
    rows = export_latents(ens, ds, pool, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0].startswith("class,route,source,z0")
    assert len(lines) == rows + 1
    assert any(",adversarial," in ln for ln in lines[1:])
    assert any(",benign," in ln for ln in lines[1:])


def test_ensemble_detector_hinge_matches_scores():
    ds, ens = _desk_setup()
    for c, vae in enumerate(ens.vaes):
        vae.refresh_baseline(ds.of_class(c), ens.detection_quantile)
    det = EnsembleDetector(ens)
    x = ds.images[:6]
    hinge = det.pass_hinge(Tensor(x, requires_grad=False)).data[:, 0]
    scores = det.vuln_scores(x)
    labels = ens.classify(x)
    means = np.array([ens.vaes[c].baseline.mean_v for c in labels])
    assert np.allclose(hinge, np.maximum(0.0, scores - means), atol=1e-12)
    assert np.array_equal(det.bypassed(x), scores < means)
