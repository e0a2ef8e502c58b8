"""Command-line orchestration.

Subcommands: train-classifier, vulnfeat, train-defense, attack, eval, sweep,
export-latents, export-images. Every run takes a flat config file plus
`--set key=value` overrides (or `--from-manifest` to replay a previous run),
derives all randomness from the config seed, and writes a reproducibility
manifest next to its outputs. Exit codes: 0 success, 1 contract/data error,
2 usage error."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .attacks import ATTACKS, ClassifierTarget, adapt_detector_bypass, parse_budget
from .config import Config, apply_overrides, load_manifest, read_config, write_manifest
from .data import (
    LabeledDataset,
    load_digits_desk,
    load_idx,
    subsample_per_class,
    subset_labels,
    split_train_test,
    synth_blobs,
    write_idx,
)
from .defense import (
    DetectorEnsemble,
    EnsembleDetector,
    EnsembleTowardClassTarget,
    VulnerablePool,
    build_ensemble,
    export_latents,
    train_minimax,
)
from .errors import AdvlabError, ContractError
from .metrics import auc, distortion, success_ratio, sweep_epsilon
from .nets import Network, load_network, save_network
from .reports import EvalReport, emit_csv, emit_json
from .train import accuracy, predict_labels, train_classifier
from .vulnfeat import build_pool, provenance_json, split_pool, train_and_eval_fv

DEFAULT_SWEEP_GRID = "0.1,0.2,0.3,0.4,0.5"


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _load_dataset(cfg: Config, rng) -> tuple[LabeledDataset, LabeledDataset]:
    kind = cfg.get("dataset", "digits")
    if kind == "digits":
        train, test = load_digits_desk(seed=cfg.get_int("seed", 0), test_fraction=cfg.get_float("test_fraction", 0.2))
    elif kind == "blobs":
        full = synth_blobs(
            cfg.get_int("blob_classes", 3),
            cfg.get_int("blob_per_class", 60),
            (cfg.get_int("blob_height", 2), cfg.get_int("blob_width", 2)),
            seed=cfg.get_int("seed", 0),
        )
        train, test = split_train_test(full, cfg.get_float("test_fraction", 0.2), rng)
    elif kind == "idx":
        train = load_idx(cfg.require("train_images"), cfg.require("train_labels"), name="train")
        test = load_idx(cfg.require("test_images"), cfg.require("test_labels"), name="test")
    else:
        raise ContractError(f"unknown dataset kind '{kind}'")
    keep = cfg.get("subset")
    if keep:
        keep_list = [int(v) for v in keep.split(",")]
        train = subset_labels(train, keep_list)
        test = subset_labels(test, keep_list)
    per_class = cfg.get_int("train_per_class")
    if per_class:
        train = subsample_per_class(train, per_class, rng)
    per_class = cfg.get_int("test_per_class")
    if per_class:
        test = subsample_per_class(test, per_class, rng)
    return train, test


def _out_dir(cfg: Config) -> str:
    out = cfg.require("out")
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_pgm(path, image01: np.ndarray) -> None:
    """8-bit binary PGM from a (H, W) or (1, H, W) image in [0, 1]."""
    img = np.asarray(image01, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    h, w = img.shape
    data = np.rint(img * 255.0).clip(0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _write_outcomes_csv(path, outcomes, origin_indices) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "true", "pred", "linf", "l2", "misled", "bypassed", "converged"])
        for src, oc in zip(origin_indices, outcomes):
            writer.writerow(
                [int(src), oc.true_label, oc.y_pred, repr(oc.linf), repr(oc.l2),
                 int(oc.misled), int(oc.bypassed_detector), int(oc.converged)]
            )


def _write_scores_csv(path, benign_scores, adversarial_scores) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source", "score"])
        for s in benign_scores:
            writer.writerow(["benign", repr(float(s))])
        for s in adversarial_scores:
            writer.writerow(["adversarial", repr(float(s))])


def _read_scores_csv(path) -> tuple[list[float], list[float]]:
    benign, adversarial = [], []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["source", "score"]:
            raise ContractError(f"{path}: expected 'source,score' header")
        for row in reader:
            (benign if row[0] == "benign" else adversarial).append(float(row[1]))
    return benign, adversarial


def _save_pair(out, stem, images, labels, num_classes) -> None:
    ds = LabeledDataset(images, labels, num_classes, stem)
    write_idx(ds, os.path.join(out, f"{stem}_images.idx"), os.path.join(out, f"{stem}_labels.idx"))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train_classifier(cfg: Config) -> int:
    seed = cfg.get_int("seed", 0)
    rng = np.random.default_rng(seed)
    train, test = _load_dataset(cfg, rng)
    net = Network(cfg.require("arch"), train.input_shape, role="classifier",
                  rng=np.random.default_rng(rng.integers(2**63)))
    train_classifier(
        net, train,
        epochs=cfg.get_int("epochs", 30),
        lr=cfg.get_float("lr", 1e-3),
        batch_size=cfg.get_int("batch_size", 32),
        rng=rng,
    )
    out = _out_dir(cfg)
    save_network(net, os.path.join(out, "classifier.nkpt"))
    metrics = {"train_accuracy": accuracy(net, train), "test_accuracy": accuracy(net, test)}
    _write_json(os.path.join(out, "metrics.json"), metrics)
    print(f"train accuracy {metrics['train_accuracy']:.4f}  test accuracy {metrics['test_accuracy']:.4f}")
    return 0


def cmd_vulnfeat(cfg: Config) -> int:
    seed = cfg.get_int("seed", 0)
    rng = np.random.default_rng(seed)
    train, test = _load_dataset(cfg, rng)
    fp = Network(cfg.require("fp_arch"), train.input_shape, role="classifier",
                 rng=np.random.default_rng(rng.integers(2**63)))
    train_classifier(fp, train, epochs=cfg.get_int("fp_epochs", 30),
                     lr=cfg.get_float("lr", 1e-3), batch_size=cfg.get_int("batch_size", 32), rng=rng)
    disc = Network(cfg.get("d_arch", "d(32) d(1)"), train.input_shape, role="discriminator",
                   rng=np.random.default_rng(rng.integers(2**63)))
    budget = parse_budget(cfg.get("attack_params", ""))
    result = build_pool(
        fp, disc, train,
        cfg.get("attack", "cw_l2"),
        budget,
        d_weight=cfg.get_float("d_weight", 0.5),
        iteration_limit=cfg.get_int("iterations", 10),
        per_iteration=cfg.get_int("per_iteration", 64),
        d_epochs=cfg.get_int("d_epochs", 25),
        d_lr=cfg.get_float("d_lr", 5e-3),
        rng=rng,
    )
    pool_train, pool_test = split_pool(result.pool, cfg.get_float("heldout_fraction", 0.1))
    fv = Network(cfg.require("fv_arch"), train.input_shape, role="classifier",
                 rng=np.random.default_rng(rng.integers(2**63)))
    acc_benign, acc_vuln = train_and_eval_fv(
        fv, pool_train, train, test, pool_test,
        epochs=cfg.get_int("fv_epochs", 40),
        lr=cfg.get_float("lr", 1e-3),
        batch_size=cfg.get_int("batch_size", 32),
        rng=rng,
    )
    out = _out_dir(cfg)
    write_idx(result.pool, os.path.join(out, "pool_images.idx"), os.path.join(out, "pool_labels.idx"))
    with open(os.path.join(out, "pool_provenance.json"), "w", encoding="utf-8") as fh:
        fh.write(provenance_json(result.provenance))
    save_network(fp, os.path.join(out, "fp.nkpt"))
    save_network(fv, os.path.join(out, "fv.nkpt"))
    doc = {
        "schema": "advlab-vulnfeat/1",
        "fp_test_accuracy": accuracy(fp, test),
        "fv_benign_accuracy": acc_benign,
        "fv_pool_accuracy": acc_vuln,
        "pool_size": len(result.pool),
        "history": result.history,
    }
    _write_json(os.path.join(out, "vulnfeat.json"), doc)
    print(f"pool {len(result.pool)}  fv benign accuracy {acc_benign:.4f}  fv held-out accuracy {acc_vuln:.4f}")
    return 0


def cmd_train_defense(cfg: Config) -> int:
    seed = cfg.get_int("seed", 0)
    rng = np.random.default_rng(seed)
    train, test = _load_dataset(cfg, rng)
    ensemble = build_ensemble(
        train.num_classes,
        cfg.require("encoder_arch"),
        cfg.require("decoder_arch"),
        train.input_shape,
        np.random.default_rng(rng.integers(2**63)),
        kl_weight=cfg.get_float("kl_weight", 1.0),
        penalty_weight=cfg.get_float("penalty_weight", 100.0),
        detection_quantile=cfg.get_float("detection_quantile", 0.95),
        ct_stride=cfg.get_int("ct_stride", 1),
    )
    budget = parse_budget(cfg.get("attack_params", ""))
    result = train_minimax(
        ensemble, train,
        cfg.get("attack", "mim"),
        budget,
        gamma0=cfg.get_float("gamma0", 1.0),
        rounds=cfg.get_int("rounds", 8),
        warmup_epochs=cfg.get_int("warmup_epochs", 30),
        defender_epochs=cfg.get_int("defender_epochs", 5),
        consolidation_epochs=cfg.get_int("consolidation_epochs", 0),
        probe_size=cfg.get_int("probe_size", 96),
        batch_size=cfg.get_int("batch_size", 32),
        lr=cfg.get_float("lr", 1e-3),
        bypass_threshold=cfg.get_float("bypass_threshold", 0.01),
        min_pool_size=cfg.get_int("min_pool_size", 0),
        rng=rng,
    )
    out = _out_dir(cfg)
    ensemble.save(os.path.join(out, "ensemble"))
    for c in range(ensemble.num_classes):
        if result.pool.size(c):
            images = result.pool.get(c)
            _save_pair(out, f"pool_class{c}", images, np.full(len(images), c, dtype=np.int64),
                       ensemble.num_classes)
    benign_acc = float(np.mean(ensemble.classify(test.images) == test.labels))
    doc = {
        "schema": "advlab-defense-training/1",
        "converged": result.converged,
        "pool_sizes": result.pool.sizes(),
        "benign_test_accuracy": benign_acc,
        "history": result.history,
    }
    _write_json(os.path.join(out, "training.json"), doc)
    print(f"benign test accuracy {benign_acc:.4f}  pools {result.pool.sizes()}  converged {result.converged}")
    return 0


def cmd_attack(cfg: Config) -> int:
    seed = cfg.get_int("seed", 0)
    rng = np.random.default_rng(seed)
    train, test = _load_dataset(cfg, rng)
    mode = cfg.get("mode", "blackbox")
    attack_name = cfg.get("attack", "fgsm")
    if attack_name not in ATTACKS:
        raise ContractError(f"unknown attack '{attack_name}'")
    budget = parse_budget(cfg.get("attack_params", ""))
    count = min(cfg.get_int("count", 128), len(test))
    pick = rng.choice(len(test), size=count, replace=False)
    x, y = test.images[pick], test.labels[pick]
    out = _out_dir(cfg)

    ensemble = None
    if cfg.get("ensemble"):
        ensemble = DetectorEnsemble.load(cfg.require("ensemble"))

    if mode == "blackbox":
        if cfg.get("substitute"):
            sub = load_network(cfg.require("substitute"))
        else:
            sub = Network(cfg.require("substitute_arch"), train.input_shape, role="classifier",
                          rng=np.random.default_rng(rng.integers(2**63)))
            train_classifier(sub, train, epochs=cfg.get_int("substitute_epochs", 30),
                             lr=cfg.get_float("lr", 1e-3), batch_size=cfg.get_int("batch_size", 32),
                             rng=rng)
            save_network(sub, os.path.join(out, "substitute.nkpt"))
        outcomes = ATTACKS[attack_name](ClassifierTarget(sub), x, y, budget,
                                        rng=np.random.default_rng(rng.integers(2**63)))
    elif mode == "whitebox":
        if ensemble is None:
            raise ContractError("whitebox attacks need an 'ensemble' checkpoint directory")
        target = EnsembleTowardClassTarget.toward_most_susceptible(ensemble, x, y)
        kwargs = {"target_labels": target.targets} if attack_name == "cw_l2" else {}
        outcomes = adapt_detector_bypass(
            attack_name, target, EnsembleDetector(ensemble),
            x, y, budget, gamma0=cfg.get_float("gamma0", 1.0),
            rng=np.random.default_rng(rng.integers(2**63)), **kwargs,
        )
    else:
        raise ContractError(f"unknown attack mode '{mode}'")

    keep_misled = cfg.get_bool("keep_only_misled", mode == "blackbox")
    kept = [i for i, oc in enumerate(outcomes) if oc.misled or not keep_misled]
    if not kept:
        raise ContractError("the attack produced no usable adversarial inputs")
    xa = np.stack([outcomes[i].x_a for i in kept])
    ya = y[kept]
    _save_pair(out, "benign", x[kept], ya, test.num_classes)
    _save_pair(out, "adversarial", xa, ya, test.num_classes)
    _write_outcomes_csv(os.path.join(out, "outcomes.csv"), [outcomes[i] for i in kept], pick[kept])
    if ensemble is not None:
        benign_scores, _ = ensemble.detect(test.images)
        adv_scores, _ = ensemble.detect(xa)
        _write_scores_csv(os.path.join(out, "scores.csv"), benign_scores, adv_scores)
    print(f"{mode} {attack_name}: kept {len(kept)}/{count} attacked inputs")
    return 0


def cmd_eval(cfg: Config) -> int:
    out = _out_dir(cfg)
    experiment_id = cfg.get("experiment_id", "eval")
    attack_name = cfg.get("attack", "unknown")
    training_attack = cfg.get("training_attack", "unknown")

    if cfg.get("scores"):
        benign, adversarial = _read_scores_csv(cfg.require("scores"))
        report = EvalReport(
            experiment_id=experiment_id, dataset=cfg.get("dataset", "scores"),
            attack=attack_name, training_attack=training_attack,
            auc=auc(benign, adversarial),
        )
    else:
        seed = cfg.get_int("seed", 0)
        rng = np.random.default_rng(seed)
        train, test = _load_dataset(cfg, rng)
        ensemble = DetectorEnsemble.load(cfg.require("ensemble"))
        attack_dir = cfg.require("attack_dir")
        benign_ds = load_idx(os.path.join(attack_dir, "benign_images.idx"),
                             os.path.join(attack_dir, "benign_labels.idx"))
        adv_ds = load_idx(os.path.join(attack_dir, "adversarial_images.idx"),
                          os.path.join(attack_dir, "adversarial_labels.idx"))
        benign_scores, _ = ensemble.detect(test.images)
        adv_scores, _ = ensemble.detect(adv_ds.images)
        pairs = [distortion(b, a) for b, a in zip(benign_ds.images, adv_ds.images)]
        report = EvalReport(
            experiment_id=experiment_id, dataset=test.name,
            attack=attack_name, training_attack=training_attack,
            benign_accuracy=float(np.mean(ensemble.classify(test.images) == test.labels)),
            auc=auc(benign_scores, adv_scores),
            success_ratio=success_ratio(adv_ds.images, ensemble),
            mean_linf=float(np.mean([p[0] for p in pairs])),
            mean_l2_255=float(np.mean([p[1] for p in pairs])),
        )
    with open(os.path.join(out, "report.csv"), "w", encoding="utf-8") as fh:
        fh.write(emit_csv(report))
    with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(emit_json(report))
    print(f"auc {report.auc}  success_ratio {report.success_ratio}")
    return 0


def cmd_sweep(cfg: Config) -> int:
    seed = cfg.get_int("seed", 0)
    rng = np.random.default_rng(seed)
    train, test = _load_dataset(cfg, rng)
    ensemble = DetectorEnsemble.load(cfg.require("ensemble"))
    budget = parse_budget(cfg.get("attack_params", ""))
    grid = cfg.get_floats("eps_grid", [float(v) for v in DEFAULT_SWEEP_GRID.split(",")])
    curve = sweep_epsilon(
        ensemble, cfg.get("attack", "mim"), test, grid, budget,
        gamma0=cfg.get_float("gamma0", 1.0),
        count=cfg.get_int("count", 64),
        rng=rng,
    )
    report = EvalReport(
        experiment_id=cfg.get("experiment_id", "sweep"),
        dataset=test.name,
        attack=cfg.get("attack", "mim"),
        training_attack=cfg.get("training_attack", "unknown"),
        benign_accuracy=float(np.mean(ensemble.classify(test.images) == test.labels)),
        curve=curve,
    )
    out = _out_dir(cfg)
    with open(os.path.join(out, "report.csv"), "w", encoding="utf-8") as fh:
        fh.write(emit_csv(report))
    with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(emit_json(report))
    print("curve " + " ".join(f"{e}:{r:.3f}" for e, r in curve))
    return 0


def cmd_export_latents(cfg: Config) -> int:
    seed = cfg.get_int("seed", 0)
    rng = np.random.default_rng(seed)
    train, _ = _load_dataset(cfg, rng)
    ensemble = DetectorEnsemble.load(cfg.require("ensemble"))
    pool = None
    pool_dir = cfg.get("pool_dir")
    if pool_dir:
        pool = VulnerablePool(ensemble.num_classes)
        for c in range(ensemble.num_classes):
            images_path = os.path.join(pool_dir, f"pool_class{c}_images.idx")
            if os.path.exists(images_path):
                ds = load_idx(images_path, os.path.join(pool_dir, f"pool_class{c}_labels.idx"))
                pool.add(c, ds.images)
    out = _out_dir(cfg)
    path = os.path.join(out, "latents.csv")
    rows = export_latents(ensemble, train, pool, path)
    print(f"wrote {rows} latent rows to {path}")
    return 0


def cmd_export_images(cfg: Config) -> int:
    attack_dir = cfg.require("attack_dir")
    benign = load_idx(os.path.join(attack_dir, "benign_images.idx"),
                      os.path.join(attack_dir, "benign_labels.idx"))
    adv = load_idx(os.path.join(attack_dir, "adversarial_images.idx"),
                   os.path.join(attack_dir, "adversarial_labels.idx"))
    if cfg.get("ensemble"):
        ensemble = DetectorEnsemble.load(cfg.require("ensemble"))
        pred_b = ensemble.classify(benign.images)
        pred_a = ensemble.classify(adv.images)
    elif cfg.get("classifier"):
        net = load_network(cfg.require("classifier"))
        pred_b = predict_labels(net, benign.images)
        pred_a = predict_labels(net, adv.images)
    else:
        raise ContractError("export-images needs an 'ensemble' directory or 'classifier' checkpoint")
    out = _out_dir(cfg)
    count = min(cfg.get_int("count", 32), len(benign))
    for i in range(count):
        true = benign.labels[i]
        write_pgm(os.path.join(out, f"{i}_{true}_{pred_b[i]}_benign.pgm"), benign.images[i])
        write_pgm(os.path.join(out, f"{i}_{true}_{pred_a[i]}_adv.pgm"), adv.images[i])
    print(f"wrote {2 * count} images to {out}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "train-classifier": cmd_train_classifier,
    "vulnfeat": cmd_vulnfeat,
    "train-defense": cmd_train_defense,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "export-latents": cmd_export_latents,
    "export-images": cmd_export_images,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advlab",
        description="Desk-scale adversarial robustness laboratory",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key: value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry")
        p.add_argument("--from-manifest", help="replay a previous run's manifest")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.from_manifest:
            manifest = load_manifest(args.from_manifest)
            if manifest["subcommand"] != args.subcommand:
                raise ContractError(
                    f"manifest records subcommand '{manifest['subcommand']}', not '{args.subcommand}'"
                )
            values = dict(manifest["config"])
        else:
            values = read_config(args.config) if args.config else {}
        values = apply_overrides(values, args.set)
        cfg = Config(values)
        status = _COMMANDS[args.subcommand](cfg)
        if "out" in cfg.values:
            write_manifest(cfg.require("out"), args.subcommand, cfg.values, cfg.get_int("seed", 0))
        return status
    except AdvlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
