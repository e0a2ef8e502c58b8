import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advlab import ContractError, DimensionError
from advlab.config import Config, apply_overrides, load_manifest, parse_config_text
from advlab.data import synth_blobs
from advlab.defense import build_ensemble
from advlab.errors import ParseError
from advlab.metrics import auc, distortion, success_ratio, sweep_epsilon
from advlab.reports import EvalReport, emit_csv, emit_json, parse_csv, parse_json

from oracles import auc_pairs

# -- auc -------------------------------------------------------------------------


def test_auc_hand_case():
    assert auc([0.1, 0.4], [0.3, 0.9]) == 0.75


def test_auc_perfect_separation():
    assert auc([0.1, 0.2, 0.3], [0.5, 0.6]) == 1.0


def test_auc_all_ties():
    assert auc([0.7, 0.7], [0.7, 0.7, 0.7]) == 0.5


def test_auc_empty_contract():
    with pytest.raises(ContractError):
        auc([], [0.1])
    with pytest.raises(ContractError):
        auc([0.1], [])


def test_auc_matches_bruteforce_oracle():
    rng = np.random.default_rng(0)
    for trial in range(50):
        nb = int(rng.integers(1, 200))
        na = int(rng.integers(1, 200))
        # quantized scores force plenty of ties
        benign = np.round(rng.uniform(size=nb), 2)
        adversarial = np.round(rng.uniform(size=na), 2)
        assert auc(benign, adversarial) == auc_pairs(benign, adversarial)


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(0.01, 0.99), min_size=1, max_size=30),
    st.lists(st.floats(0.01, 0.99), min_size=1, max_size=30),
)
def test_auc_invariant_under_increasing_transform(benign, adversarial):
    base = auc(benign, adversarial)
    for f in (np.log, np.exp, lambda v: 5.0 * np.asarray(v) + 2.0):
        assert abs(auc(f(np.asarray(benign)), f(np.asarray(adversarial))) - base) < 1e-12


# -- distortion --------------------------------------------------------------------


def test_distortion_zero():
    x = np.zeros((1, 2, 2))
    assert distortion(x, x) == (0.0, 0.0)


def test_distortion_formula():
    x = np.zeros(4)
    xa = np.array([1.0, 0.0, 0.0, 0.0])
    linf, l2 = distortion(x, xa)
    assert linf == 1.0 and l2 == 127.5


def test_distortion_shape_mismatch():
    with pytest.raises(DimensionError):
        distortion(np.zeros(3), np.zeros(4))


# -- success ratio -------------------------------------------------------------------


def _baselined_ensemble():
    ds = synth_blobs(1, 30, (2, 2), seed=1)
    ens = build_ensemble(1, "z(3,3)", "d(4)", (1, 2, 2), np.random.default_rng(2))
    ens.vaes[0].refresh_baseline(ds.images, 0.95)
    return ds, ens


def test_success_ratio_none_pass():
    ds, ens = _baselined_ensemble()
    ens.vaes[0].baseline.mean_v = -1.0  # C1 impossible: scores are positive
    assert success_ratio(ds.images[:4], ens) == 0.0


def test_success_ratio_one_of_four():
    ds, ens = _baselined_ensemble()
    x = ds.images[:4]
    s_v = ens.vaes[0].score_v(x)
    s_r = ens.vaes[0].score_r(x)
    ens.vaes[0].baseline.mean_v = float(np.sort(s_v)[0] + 1e-9)  # exactly one below
    ens.vaes[0].baseline.mean_r = float(np.min(s_r) - 1e-9)  # all above
    assert success_ratio(x, ens) == 0.25


def test_success_ratio_empty_contract():
    _, ens = _baselined_ensemble()
    with pytest.raises(ContractError):
        success_ratio([], ens)


def test_sweep_requires_increasing_grid():
    ds, ens = _baselined_ensemble()
    from advlab.attacks import PerturbationBudget

    with pytest.raises(ContractError):
        sweep_epsilon(ens, "mim", ds, [0.3, 0.2], PerturbationBudget(epsilon=0.1))


# -- reports -----------------------------------------------------------------------


def _report():
    return EvalReport(
        experiment_id="exp-7",
        dataset="digits8x8",
        attack="pgd",
        training_attack="mim",
        benign_accuracy=0.9672131147540983,
        auc=0.9134,
        success_ratio=None,
        mean_l2_255=45.08123,
        mean_linf=0.3,
        curve=((0.1, 0.02), (0.2, 0.11), (0.5, 0.43)),
    )


def test_report_csv_roundtrip_exact():
    r = _report()
    assert parse_csv(emit_csv(r)) == r


def test_report_json_roundtrip_exact():
    r = _report()
    assert parse_json(emit_json(r)) == r


def test_report_validation():
    with pytest.raises(ContractError):
        EvalReport("e", "d", "a", "t", auc=1.5)
    with pytest.raises(ContractError):
        EvalReport("e", "d", "a", "t", curve=((0.2, 0.1), (0.1, 0.2)))


# -- config ------------------------------------------------------------------------


def test_config_parse_and_overrides():
    text = "# comment\nseed: 3\narch: c(2,20) mp(2) d(500) sm(10)\n\nlr: 1e-3\n"
    values = parse_config_text(text)
    assert values["arch"] == "c(2,20) mp(2) d(500) sm(10)"
    cfg = Config(apply_overrides(values, ["seed=9", "out=/tmp/x"]))
    assert cfg.get_int("seed") == 9
    assert cfg.get_float("lr") == 1e-3
    with pytest.raises(ContractError):
        cfg.require("missing")


def test_config_parse_error_offset():
    with pytest.raises(ParseError):
        parse_config_text("seed 3\n")


# -- cli ---------------------------------------------------------------------------


from advlab.cli import main as cli_main


def _write_cfg(path, **kv):
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in kv.items():
            fh.write(f"{k}: {v}\n")


BLOB_BASE = dict(
    dataset="blobs",
    blob_classes=2,
    blob_per_class=30,
    blob_height=2,
    blob_width=2,
    seed=5,
)


def test_cli_train_classifier_and_determinism(tmp_path):
    cfg = tmp_path / "train.cfg"
    _write_cfg(cfg, **BLOB_BASE, arch="d(6) sm(2)", epochs=8, lr=0.02,
               batch_size=16, out=str(tmp_path / "run1"))
    assert cli_main(["train-classifier", "--config", str(cfg)]) == 0
    assert cli_main(["train-classifier", "--config", str(cfg),
                     "--set", f"out={tmp_path/'run2'}"]) == 0
    m1 = (tmp_path / "run1" / "metrics.json").read_bytes()
    m2 = (tmp_path / "run2" / "metrics.json").read_bytes()
    assert m1 == m2
    # replay from the manifest reproduces bit-identically
    assert cli_main(["train-classifier", "--from-manifest",
                     str(tmp_path / "run1" / "manifest.json"),
                     "--set", f"out={tmp_path/'run3'}"]) == 0
    assert (tmp_path / "run3" / "metrics.json").read_bytes() == m1


def test_cli_eval_stored_scores(tmp_path):
    scores = tmp_path / "scores.csv"
    scores.write_text("source,score\nbenign,0.1\nbenign,0.4\nadversarial,0.3\nadversarial,0.9\n")
    out = tmp_path / "evalout"
    assert cli_main(["eval", "--set", f"scores={scores}", "--set", f"out={out}"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["auc"] == 0.75
    # determinism: re-running produces identical bytes
    blob1 = (out / "report.csv").read_bytes()
    assert cli_main(["eval", "--set", f"scores={scores}", "--set", f"out={out}"]) == 0
    assert (out / "report.csv").read_bytes() == blob1


def test_cli_exit_codes(tmp_path):
    # usage error: unknown subcommand
    assert cli_main(["no-such-command"]) == 2
    # contract error: missing required key (no arch)
    assert cli_main(["train-classifier", "--set", "dataset=blobs", "--set", "blob_classes=2",
                     "--set", "blob_per_class=8", "--set", "epochs=1",
                     "--set", f"out={tmp_path/'x'}"]) == 1
    # contract error: class count disagrees with the architecture
    assert cli_main(["train-classifier", "--set", "dataset=blobs", "--set", "blob_classes=3",
                     "--set", "blob_per_class=8", "--set", "arch=d(4) sm(2)",
                     "--set", "epochs=1", "--set", f"out={tmp_path/'y'}"]) == 1
    # contract error: malformed config file
    bad = tmp_path / "bad.cfg"
    bad.write_text("this is not a config\n")
    assert cli_main(["train-classifier", "--config", str(bad)]) == 1


def test_cli_defense_attack_eval_chain(tmp_path):
    defense_cfg = dict(
        **BLOB_BASE,
        encoder_arch="z(4,4)",
        decoder_arch="d(6) d(4)",
        attack="mim",
        attack_params="e:0.4, i:5, ss:0.1, df:0.9, bs:1",
        rounds=2,
        warmup_epochs=6,
        defender_epochs=2,
        probe_size=16,
        batch_size=16,
        out=str(tmp_path / "defense"),
    )
    cfg = tmp_path / "defense.cfg"
    _write_cfg(cfg, **defense_cfg)
    assert cli_main(["train-defense", "--config", str(cfg)]) == 0
    ens_dir = tmp_path / "defense" / "ensemble"
    assert (ens_dir / "manifest.json").exists()

    # blackbox attack with a freshly trained substitute
    atk_cfg = tmp_path / "attack.cfg"
    _write_cfg(atk_cfg, **BLOB_BASE, mode="blackbox", attack="fgsm",
               attack_params="e:0.3", substitute_arch="d(6) sm(2)",
               substitute_epochs=8, count=12, ensemble=str(ens_dir),
               out=str(tmp_path / "atk"))
    assert cli_main(["attack", "--config", str(atk_cfg)]) == 0
    assert (tmp_path / "atk" / "scores.csv").exists()
    assert (tmp_path / "atk" / "outcomes.csv").exists()

    # eval over the stored attack artifacts
    ev_cfg = tmp_path / "eval.cfg"
    _write_cfg(ev_cfg, **BLOB_BASE, ensemble=str(ens_dir),
               attack_dir=str(tmp_path / "atk"), attack="fgsm",
               training_attack="mim", out=str(tmp_path / "ev"))
    assert cli_main(["eval", "--config", str(ev_cfg)]) == 0
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert 0.0 <= report["auc"] <= 1.0
    assert 0.0 <= report["success_ratio"] <= 1.0
    # stored pairs are u8-quantized IDX, so allow one grey level of slack
    assert report["mean_linf"] <= 0.3 + 1.0 / 255.0

    # sweep over a small grid
    sw_cfg = tmp_path / "sweep.cfg"
    _write_cfg(sw_cfg, **BLOB_BASE, ensemble=str(ens_dir), attack="mim",
               attack_params="i:4, ss:0.1, df:0.9, bs:1", eps_grid="0.1,0.3",
               count=8, out=str(tmp_path / "sw"))
    assert cli_main(["sweep", "--config", str(sw_cfg)]) == 0
    report = json.loads((tmp_path / "sw" / "report.json").read_text())
    assert [e for e, _ in report["curve"]] == [0.1, 0.3]

    # latent export
    lat_cfg = tmp_path / "lat.cfg"
    _write_cfg(lat_cfg, **BLOB_BASE, ensemble=str(ens_dir),
               pool_dir=str(tmp_path / "defense"), out=str(tmp_path / "lat"))
    assert cli_main(["export-latents", "--config", str(lat_cfg)]) == 0
    lines = (tmp_path / "lat" / "latents.csv").read_text().strip().splitlines()
    assert lines[0] == "class,route,source,z0,z1,z2,z3"

    # image export from the attack artifacts
    img_cfg = tmp_path / "img.cfg"
    _write_cfg(img_cfg, ensemble=str(ens_dir), attack_dir=str(tmp_path / "atk"),
               count=3, out=str(tmp_path / "img"))
    assert cli_main(["export-images", "--config", str(img_cfg)]) == 0
    names = sorted(os.listdir(tmp_path / "img"))
    pgms = [n for n in names if n.endswith(".pgm")]
    assert len(pgms) == 6
    assert any(n.endswith("_benign.pgm") for n in pgms)
    assert any(n.endswith("_adv.pgm") for n in pgms)
    blob = (tmp_path / "img" / pgms[0]).read_bytes()
    assert blob.startswith(b"P5\n2 2\n255\n")


def test_manifest_contents(tmp_path):
    cfg = tmp_path / "t.cfg"
    _write_cfg(cfg, **BLOB_BASE, arch="d(4) sm(2)", epochs=2, out=str(tmp_path / "m"))
    assert cli_main(["train-classifier", "--config", str(cfg)]) == 0
    manifest = load_manifest(tmp_path / "m" / "manifest.json")
    assert manifest["subcommand"] == "train-classifier"
    assert manifest["config"]["arch"] == "d(4) sm(2)"
    assert manifest["seed"] == 5
    assert set(manifest["versions"]) == {"python", "numpy", "advlab"}
