"""Hyperparameter probing for the desk-scale defense (development tool)."""

import argparse
import json
import sys
import time

import numpy as np

from advlab.attacks import ATTACKS, ClassifierTarget, parse_budget
from advlab.data import load_digits_desk
from advlab.defense import DetectorEnsemble, build_ensemble, train_minimax
from advlab.metrics import auc, success_ratio, sweep_epsilon
from advlab.nets import Network
from advlab.train import train_classifier


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--save", default=None)
    ap.add_argument("--load", default=None)
    ap.add_argument("--encoder", default="2(c(3,16))z(8,8)")
    ap.add_argument("--decoder", default="d(24) d(16) 2(ct(3,8)) d(64)")
    ap.add_argument("--budget", default="e:0.4, i:120, ss:0.05, df:0.9, bs:3")
    ap.add_argument("--rounds", type=int, default=8)
    ap.add_argument("--warmup", type=int, default=20)
    ap.add_argument("--defender", type=int, default=10)
    ap.add_argument("--consolidation", type=int, default=40)
    ap.add_argument("--probe", type=int, default=128)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--threshold", type=float, default=0.01)
    ap.add_argument("--min-pool", type=int, default=0)
    ap.add_argument("--gamma0", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=6)
    ap.add_argument("--skip-eval", action="store_true")
    ap.add_argument("--sweep", action="store_true")
    args = ap.parse_args()

    train, test = load_digits_desk(seed=0)
    t0 = time.time()
    if args.load:
        ens = DetectorEnsemble.load(args.load)
        pools = None
    else:
        ens = build_ensemble(10, args.encoder, args.decoder, train.input_shape,
                             np.random.default_rng(5))
        res = train_minimax(
            ens, train, "mim", parse_budget(args.budget),
            gamma0=args.gamma0, rounds=args.rounds, warmup_epochs=args.warmup,
            defender_epochs=args.defender, consolidation_epochs=args.consolidation,
            probe_size=args.probe, batch_size=32, lr=args.lr,
            bypass_threshold=args.threshold, min_pool_size=args.min_pool,
            rng=np.random.default_rng(args.seed),
        )
        pools = res.pool.sizes()
        print(f"train time {time.time()-t0:.0f}s pools {pools}")
        for c, log in enumerate(res.history):
            print(" ", c, [round(e["bypass_rate"], 2) for e in log])
        if args.save:
            ens.save(args.save)

    acc = float(np.mean(ens.classify(test.images) == test.labels))
    print("benign test accuracy:", round(acc, 4))
    if args.skip_eval:
        return

    # blackbox detection
    rng = np.random.default_rng(99)
    sub = Network("c(3,12) mp(2) d(48) sm(10)", train.input_shape, rng=np.random.default_rng(7))
    train_classifier(sub, train, epochs=25, lr=2e-3, batch_size=32, rng=np.random.default_rng(8))
    benign_scores, _ = ens.detect(test.images)
    target = ClassifierTarget(sub)
    configs = {
        "fgsm": "e:0.3",
        "pgd": "e:0.4, i:9, ss:0.05",
        "mim": "e:0.3, i:16, ss:0.02, df:0.3",
        "cw_l2": "i:16, lr:0.1, cf:3, ic:10, bs:1",
    }
    t1 = time.time()
    for name, params in configs.items():
        pick = rng.choice(len(test), 150, replace=False)
        outs = ATTACKS[name](target, test.images[pick], test.labels[pick],
                             parse_budget(params), rng=np.random.default_rng(11))
        fooled = [oc for oc in outs if oc.misled]
        xa = np.stack([oc.x_a for oc in fooled])
        adv_scores, _ = ens.detect(xa)
        print(f"blackbox {name}: fooled {len(fooled)}/150  AUC {auc(benign_scores, adv_scores):.4f}")
    print(f"blackbox eval {time.time()-t1:.0f}s")

    if args.sweep:
        t2 = time.time()
        curve = sweep_epsilon(ens, "mim", test, [0.1, 0.2, 0.3, 0.4, 0.5],
                              parse_budget("i:100, ss:0.02, df:0.9, bs:2"),
                              gamma0=args.gamma0, count=60, rng=np.random.default_rng(12))
        print("whitebox mim curve:", [(e, round(r, 3)) for e, r in curve], f"{time.time()-t2:.0f}s")


if __name__ == "__main__":
    sys.exit(main())
