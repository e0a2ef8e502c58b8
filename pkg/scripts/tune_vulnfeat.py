"""Hyperparameter probing for the vulnerable-feature experiment (dev tool)."""

import argparse
import sys
import time

import numpy as np

from advlab.attacks import parse_budget
from advlab.data import load_digits_desk
from advlab.nets import Network
from advlab.train import accuracy, train_classifier
from advlab.vulnfeat import build_pool, split_pool, train_and_eval_fv


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--attack", default="cw_l2")
    ap.add_argument("--budget", default="i:16, lr:0.1, cf:3, ic:10, bs:1")
    ap.add_argument("--d-weight", type=float, default=0.5)
    ap.add_argument("--iterations", type=int, default=10)
    ap.add_argument("--per-iter", type=int, default=80)
    ap.add_argument("--fv-epochs", type=int, default=40)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    train, test = load_digits_desk(seed=0)
    rng = np.random.default_rng(args.seed)
    t0 = time.time()
    fp = Network("c(3,16) mp(2) d(64) sm(10)", train.input_shape, rng=np.random.default_rng(1))
    train_classifier(fp, train, epochs=25, lr=2e-3, batch_size=32, rng=np.random.default_rng(2))
    print("fp test acc", accuracy(fp, test), f"{time.time()-t0:.0f}s")

    disc = Network("c(3,8) mp(2) d(32) d(1)", train.input_shape, role="discriminator",
                   rng=np.random.default_rng(3))
    result = build_pool(fp, disc, train, args.attack, parse_budget(args.budget),
                        d_weight=args.d_weight, iteration_limit=args.iterations,
                        per_iteration=args.per_iter, rng=rng)
    print(f"pool {len(result.pool)}  time {time.time()-t0:.0f}s")
    for h in result.history:
        print(" ", h)
    label_counts = np.bincount(result.pool.labels, minlength=10)
    print("pool label distribution:", label_counts)

    pool_train, pool_test = split_pool(result.pool, 0.1)
    fv = Network("c(3,16) mp(2) d(32) sm(10)", train.input_shape, rng=np.random.default_rng(4))
    acc_b, acc_v = train_and_eval_fv(fv, pool_train, train, test, pool_test,
                                     epochs=args.fv_epochs, lr=2e-3,
                                     rng=np.random.default_rng(5))
    print(f"fv benign acc {acc_b:.4f}  fv heldout acc {acc_v:.4f}  total {time.time()-t0:.0f}s")


if __name__ == "__main__":
    sys.exit(main())
