"""AHI recovery: oracle probabilities, then a trained apnea model on held-out subjects."""

import argparse
import json

from breathstage.apnea import ApneaTrainConfig
from breathstage.experiments import AhiSetup, run_ahi_oracle, run_ahi_recovery
from breathstage.synth import CohortSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--subjects", type=int, default=60)
    ap.add_argument("--steps", type=int, default=ApneaTrainConfig.steps)
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()
    spec = CohortSpec(n_subjects=args.subjects, seed=args.seed)
    print("oracle:", json.dumps(run_ahi_oracle(spec)))
    res = run_ahi_recovery(AhiSetup(cohort=spec, train=ApneaTrainConfig(steps=args.steps)))
    res.pop("pred_ahi"), res.pop("true_ahi")
    print("trained:", json.dumps(res))


if __name__ == "__main__":
    main()
