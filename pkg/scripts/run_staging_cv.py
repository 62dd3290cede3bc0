"""Grouped 4-fold CV of the toy-width staging model on a synthetic cohort."""

import argparse
import json
import logging

from breathstage.experiments import StagingCvSetup, run_staging_cv
from breathstage.synth import CohortSpec
from breathstage.training import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--subjects", type=int, default=200)
    ap.add_argument("--hours", type=float, default=8.0)
    ap.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    setup = StagingCvSetup(
        cohort=CohortSpec(n_subjects=args.subjects, night_hours=args.hours, seed=args.seed),
        train=TrainConfig(epochs=args.epochs, seed=args.seed),
    )
    print(json.dumps(run_staging_cv(setup), indent=2))


if __name__ == "__main__":
    main()
