"""Student with and without the synthetic teacher, same split and init, over several seeds."""

import argparse

import numpy as np

from breathstage.experiments import DistillSetup, run_distillation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--fidelity", type=float, default=0.95)
    args = ap.parse_args()
    setup = DistillSetup(teacher_fidelity=args.fidelity)
    diffs = []
    for seed in range(args.seeds):
        r = run_distillation(setup, seed)
        diffs.append(r["distilled_acc4"] - r["plain_acc4"])
        print(f"seed {seed}: plain {r['plain_acc4']:.4f} distilled {r['distilled_acc4']:.4f} ({r['seconds_total']:.0f} s)", flush=True)
    print(f"mean improvement {100 * np.mean(diffs):.2f} points")


if __name__ == "__main__":
    main()
