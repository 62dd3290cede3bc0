"""Synthetic end-to-end experiments behind the acceptance suite and scripts/.

Each ``run_*`` function takes a setup dataclass and returns a plain dict of
results so callers can print, assert on, or dump them as JSON.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from breathstage import apnea, metrics, nn
from breathstage.signal_io import CANONICAL_HZ, BreathingRecord, Channel, prepare
from breathstage.stages import collapse_labels
from breathstage.staging import StagingModel, StagingModelConfig, stage_night
from breathstage.synth import CohortSpec, gen_cohort
from breathstage.training import (
    CrtConfig,
    DistillConfig,
    StagingData,
    TrainConfig,
    crt_retrain,
    grouped_kfold,
    make_synthetic_teacher,
    pooled_accuracy,
    predict_records,
    train_cv,
    train_model,
)


def _holdout(subject_ids, seed):
    """Subject-grouped half split: fold 0 of a 2-fold partition is the test set."""
    folds = grouped_kfold(subject_ids, 2, seed)
    return folds.train_indices(subject_ids, 0), folds.test_indices(subject_ids, 0)


def _record_acc4(pred, data, idx) -> dict[int, float]:
    return {int(i): metrics.epoch_accuracy(pred[int(i)].stages4(), collapse_labels(data.stages[i])) for i in idx}


# ------------------------------------------------------------ staging CV


@dataclass
class StagingCvSetup:
    cohort: CohortSpec = field(default_factory=CohortSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    folds: int = 4


def run_staging_cv(setup: StagingCvSetup) -> dict:
    t0 = time.perf_counter()
    cohort = gen_cohort(setup.cohort)
    data = StagingData.from_cohort(cohort)
    t_gen = time.perf_counter() - t0
    res = train_cv(data, setup.train, k=setup.folds)
    p5 = np.concatenate([res.pooled[i].stages for i in range(len(data))])
    t5 = np.concatenate(data.stages)
    return {
        "n_records": len(data),
        "n_subjects": len(set(data.subject_ids)),
        "pooled_acc4": pooled_accuracy(res.pooled, data),
        "pooled_acc5": pooled_accuracy(res.pooled, data, four_class=False),
        "kappa5": metrics.cohens_kappa(p5, t5),
        "kappa4": metrics.cohens_kappa(collapse_labels(p5), collapse_labels(t5)),
        "covered_once": sorted(res.pooled) == list(range(len(data))),
        "seconds_generate": t_gen,
        "seconds_total": time.perf_counter() - t0,
    }


# ------------------------------------------------------------------- AHI


def run_ahi_oracle(spec: CohortSpec) -> dict:
    """Feed per-second 0/1 event masks through post-processing and AHI."""
    errors = []
    for subj in gen_cohort(spec):
        n_s = int(subj.record.duration_s)
        probs = apnea.event_targets(subj.labels.events, n_s)
        rep = apnea.compute_ahi(apnea.postprocess(probs), subj.labels.tst_hours, subj.record_id)
        injected = len(subj.labels.events) / subj.labels.tst_hours
        errors.append(abs(rep.ahi - injected))
    return {"n": len(errors), "max_abs_error": float(max(errors)), "mean_abs_error": float(np.mean(errors))}


@dataclass
class AhiSetup:
    cohort: CohortSpec = field(default_factory=lambda: CohortSpec(n_subjects=60, seed=3))
    train: apnea.ApneaTrainConfig = field(default_factory=apnea.ApneaTrainConfig)
    threshold: float = 0.5


def run_ahi_recovery(setup: AhiSetup) -> dict:
    """Train the apnea model on half the subjects and score the other half.

    Total sleep time comes from the stage labels so the comparison isolates
    event detection from staging errors.
    """
    t0 = time.perf_counter()
    cohort = gen_cohort(setup.cohort)
    signals = [prepare(s.record).samples for s in cohort]
    hz = int(CANONICAL_HZ)
    targets = [apnea.event_targets(s.labels.events, x.size // hz) for s, x in zip(cohort, signals)]
    train_idx, test_idx = _holdout([s.meta.subject_id for s in cohort], setup.cohort.seed)
    model = apnea.train_apnea_model([signals[i] for i in train_idx], [targets[i] for i in train_idx], setup.train)
    pred, true = [], []
    for i in test_idx:
        subj = cohort[i]
        x = signals[i][: signals[i].size // hz * hz]
        events = apnea.postprocess(model.predict_proba(x[None, :])[0], setup.threshold)
        tst = subj.labels.tst_hours
        pred.append(apnea.compute_ahi(events, tst).ahi)
        true.append(len(subj.labels.events) / tst)
    pairs = np.column_stack([pred, true])
    icc, lo, hi = metrics.icc_2_1(pairs)
    agree = np.mean([apnea.Severity.from_ahi(a) == apnea.Severity.from_ahi(b) for a, b in pairs])
    return {
        "n_test": len(test_idx),
        "icc": icc,
        "icc_ci": (lo, hi),
        "severity_agreement": float(agree),
        "pred_ahi": pred,
        "true_ahi": true,
        "seconds_total": time.perf_counter() - t0,
    }


# ------------------------------------------------------------------- CRT


@dataclass
class CrtSetup:
    cohort: CohortSpec = field(
        default_factory=lambda: CohortSpec(night_hours=2.0, minority_noise_sd=0.8, minority_noise_band=(0.2, 0.35))
    )
    n_train: int = 60
    minority_fraction: float = 0.1
    n_test: int = 300
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=15))
    crt: CrtConfig = field(default_factory=CrtConfig)


def run_crt(setup: CrtSetup, seed: int) -> dict:
    """Base model, then group-weighted head retraining, both scored on a fresh cohort.

    The training set holds exactly ``minority_fraction`` minority subjects,
    taken from a larger draw, so the imbalance does not vary with the seed.
    The test cohort is drawn independently with the natural mix. The gap is
    majority minus minority mean per-record 4-class accuracy.
    """
    t0 = time.perf_counter()
    spec = replace(setup.cohort, seed=setup.cohort.seed + seed)
    pool = gen_cohort(replace(spec, n_subjects=3 * setup.n_train))
    n_min = round(setup.minority_fraction * setup.n_train)
    chosen = [s for s in pool if s.minority][:n_min] + [s for s in pool if not s.minority][: setup.n_train - n_min]
    test = gen_cohort(replace(spec, n_subjects=setup.n_test, seed=spec.seed + 1000))
    cohort = chosen + test
    data = StagingData.from_cohort(cohort)
    minority = np.array([s.minority for s in cohort])
    train_idx = np.arange(len(chosen))
    test_idx = np.arange(len(chosen), len(cohort))
    base = train_model(data, train_idx, replace(setup.train, seed=seed))
    tuned = crt_retrain(base, data, train_idx, minority[train_idx], replace(setup.crt, seed=seed))

    def summary(model):
        pred = predict_records(model, data, test_idx)
        acc = _record_acc4(pred, data, test_idx)
        mi = float(np.mean([a for i, a in acc.items() if minority[i]]))
        ma = float(np.mean([a for i, a in acc.items() if not minority[i]]))
        return {"gap": ma - mi, "minority": mi, "majority": ma, "overall": pooled_accuracy(pred, data)}

    return {
        "seed": seed,
        "n_minority_train": int(minority[train_idx].sum()),
        "n_minority_test": int(minority[test_idx].sum()),
        "base": summary(base),
        "crt": summary(tuned),
        "encoder_before": base.params.checksum("enc."),
        "encoder_after": tuned.params.checksum("enc."),
        "seconds_total": time.perf_counter() - t0,
    }


def summarize_crt(runs: list[dict]) -> dict:
    base_gap = float(np.mean([r["base"]["gap"] for r in runs]))
    crt_gap = float(np.mean([r["crt"]["gap"] for r in runs]))
    return {
        "base_gap": base_gap,
        "crt_gap": crt_gap,
        # ratio of seed-averaged gaps; a per-seed ratio explodes when one base gap is near zero
        "relative_reduction": 1.0 - crt_gap / base_gap if base_gap > 0 else float("nan"),
        "overall_drop": float(np.mean([r["base"]["overall"] - r["crt"]["overall"] for r in runs])),
        "encoders_unchanged": all(r["encoder_before"] == r["encoder_after"] for r in runs),
    }


# ---------------------------------------------------------- distillation


@dataclass
class DistillSetup:
    cohort: CohortSpec = field(default_factory=lambda: CohortSpec(n_subjects=40, night_hours=2.0))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=12))
    distill: DistillConfig = field(default_factory=DistillConfig)
    teacher_fidelity: float = 0.95


def run_distillation(setup: DistillSetup, seed: int) -> dict:
    """Same split, init and crops with and without the synthetic teacher."""
    t0 = time.perf_counter()
    spec = replace(setup.cohort, seed=setup.cohort.seed + seed)
    data = StagingData.from_cohort(gen_cohort(spec))
    train_idx, test_idx = _holdout(data.subject_ids, seed)
    plain_cfg = replace(setup.train, seed=seed, distill=None)
    kd_cfg = replace(setup.train, seed=seed, distill=setup.distill)
    teachers = {
        int(i): make_synthetic_teacher(data.stages[i], setup.teacher_fidelity, [seed, 3, int(i)], kd_cfg.teacher_feat_dim)
        for i in train_idx
    }
    snapshot = {i: (t.logits.copy(), t.feats.copy()) for i, t in teachers.items()}
    plain = train_model(data, train_idx, plain_cfg)
    student = train_model(data, train_idx, kd_cfg, teachers=teachers)
    untouched = all(
        np.array_equal(t.logits, snapshot[i][0]) and np.array_equal(t.feats, snapshot[i][1]) for i, t in teachers.items()
    )
    return {
        "seed": seed,
        "plain_acc4": pooled_accuracy(predict_records(plain, data, test_idx), data),
        "distilled_acc4": pooled_accuracy(predict_records(student, data, test_idx), data),
        "teachers_untouched": untouched,
        "seconds_total": time.perf_counter() - t0,
    }


# ------------------------------------------------ determinism, throughput


def digest_tree(root) -> dict[str, str]:
    root = Path(root)
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.suffix in {".ckpt", ".csv", ".svg", ".json"} and p.name != "run_config.json"
    }


def time_inference(config: StagingModelConfig | None = None, hours: float = 8.0, repeats: int = 3) -> float:
    """Best-of-``repeats`` wall time to stage one night at 10 Hz."""
    model = StagingModel.create(config or StagingModelConfig.toy(), nn.make_rng(0))
    n = int(hours * 3600 * CANONICAL_HZ)
    rec = BreathingRecord("bench", Channel.RADIO, CANONICAL_HZ, np.random.default_rng(0).standard_normal(n))
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        stage_night(model, rec)
        best = min(best, time.perf_counter() - t0)
    return best
