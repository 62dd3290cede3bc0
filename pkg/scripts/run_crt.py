"""Head-only group-weighted retraining on the minority-shift cohort, over several seeds."""

import argparse
import json

from breathstage.experiments import CrtSetup, run_crt, summarize_crt


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--group-weight", type=int, default=8)
    args = ap.parse_args()
    setup = CrtSetup()
    setup.crt.group_weight = args.group_weight
    runs = []
    for seed in range(args.seeds):
        r = run_crt(setup, seed)
        runs.append(r)
        print(f"seed {seed}: gap {r['base']['gap']:.4f} -> {r['crt']['gap']:.4f}, "
              f"overall {r['base']['overall']:.4f} -> {r['crt']['overall']:.4f} ({r['seconds_total']:.0f} s)", flush=True)
    print(json.dumps(summarize_crt(runs), indent=2))


if __name__ == "__main__":
    main()
