"""Fit the timestamp-ordering head on zeroed embeddings and report pairwise accuracy."""

import argparse

from tkgqa.tkge import fit_order_head


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--timestamps", type=int, default=64)
    parser.add_argument("--dim", type=int, default=16)
    parser.add_argument("--steps", type=int, default=200)
    parser.add_argument("--lr", type=float, default=1.0)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    for seed in range(args.seed, args.seed + 5):
        acc, curve = fit_order_head(args.timestamps, args.dim, args.steps, args.lr, seed=seed)
        print(f"seed {seed}: accuracy {acc:.4f}  loss {curve[0]:.4f} -> {curve[-1]:.4f}")


if __name__ == "__main__":
    main()
