"""Command-line entry point: ``breathstage <subcommand> ...``.

Every flag can also be set through an environment variable named
``BREATHSTAGE_<FLAG>`` (dashes become underscores); explicit flags win.
Exit codes: 0 success, 1 invalid input or configuration, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from breathstage import apnea, metrics, plots, stats, synth, training
from breathstage.nn import CheckpointError
from breathstage.signal_io import (
    CANONICAL_HZ,
    EPOCH_S,
    ManifestEntry,
    SignalIOError,
    TooShort,
    check_pipeline_entry,
    load_record,
    parse_edf_subset,
    prepare,
    read_events,
    read_manifest,
    read_sidecar,
    read_stage_labels,
    sidecar_subject_meta,
    write_json_atomic,
)
from breathstage.stages import Stage5, collapse_labels
from breathstage.staging import Hypnogram, StagingModel, StagingModelConfig, stage_night

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2
ENV_PREFIX = "BREATHSTAGE_"

log = logging.getLogger("breathstage")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _truthy(text: str) -> bool:
    low = text.strip().lower()
    if low in {"1", "true", "yes", "on"}:
        return True
    if low in {"0", "false", "no", "off", ""}:
        return False
    raise UsageError(f"cannot read {text!r} as a boolean")


def _apply_env(parser: argparse.ArgumentParser) -> None:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                _apply_env(sub)
            continue
        if not action.option_strings or action.dest == "help":
            continue
        raw = os.environ.get(ENV_PREFIX + action.dest.upper())
        if raw is None:
            continue
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            value = _truthy(raw)
        else:
            try:
                value = action.type(raw) if action.type else raw
            except (TypeError, ValueError) as exc:
                raise UsageError(f"{ENV_PREFIX}{action.dest.upper()}: {exc}") from None
            if action.choices is not None and value not in action.choices:
                raise UsageError(f"{ENV_PREFIX}{action.dest.upper()}={raw!r} is not one of {sorted(action.choices)}")
        action.default = value


def _effective_config(args) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"}


def _log_config(args, out_dir: Path | None) -> None:
    cfg = _effective_config(args)
    log.info("effective config: %s", json.dumps(cfg, sort_keys=True))
    if out_dir is not None:
        write_json_atomic(out_dir / "run_config.json", cfg)


# ------------------------------------------------------------------ inputs


def _load_prepared(path: Path):
    """Any supported record file -> (prepared 10 Hz record, sidecar dict or None)."""
    if path.suffix.lower() == ".edf":
        rec, side = parse_edf_subset(path)[0], None
    else:
        rec, side = load_record(path)
    check_pipeline_entry(rec)
    return prepare(rec), side


def _entries(args) -> list[ManifestEntry]:
    entries = []
    if getattr(args, "manifest", None):
        entries.extend(read_manifest(args.manifest))
    for p in getattr(args, "inputs", None) or []:
        p = Path(p)
        stages = p.with_name(p.stem + "_stages.csv")
        events = p.with_name(p.stem + "_events.csv")
        entries.append(
            ManifestEntry(p.stem, p.stem, p, stages if stages.exists() else None, events if events.exists() else None, None)
        )
    if not entries:
        raise UsageError("no input records: pass record paths or --manifest")
    ids = [e.record_id for e in entries]
    if len(set(ids)) != len(ids):
        raise UsageError("record ids must be unique")
    return entries


def _fan_out(fn, jobs_args: list, jobs: int) -> list:
    if jobs <= 1 or len(jobs_args) <= 1:
        return [fn(a) for a in jobs_args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, jobs_args))


_MODEL_CACHE: dict = {}


def _cached(kind: str, path: str):
    key = (kind, path)
    if key not in _MODEL_CACHE:
        _MODEL_CACHE[key] = StagingModel.load(path) if kind == "staging" else apnea.ApneaModel.load(path)
    return _MODEL_CACHE[key]


def _require_file(path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


# ------------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    spec = synth.CohortSpec.from_json(_require_file(args.spec_file, "cohort spec"))
    if args.seed is not None:
        spec.seed = args.seed
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _log_config(args, None)
    manifest = synth.write_cohort(synth.gen_cohort(spec), out, spec)
    print(manifest)
    return EXIT_OK


# ------------------------------------------------------------------- stage


def _stage_one(job) -> str:
    ckpt, entry, out = job
    rec, _ = _load_prepared(entry.record)
    hyp = stage_night(_cached("staging", ckpt), rec)
    dest = Path(out) / f"{entry.record_id}.hypnogram.csv"
    hyp.to_csv(dest)
    return str(dest)


def cmd_stage(args) -> int:
    ckpt = _require_file(args.checkpoint, "checkpoint")
    StagingModel.load(ckpt)  # fail fast on a bad checkpoint
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _log_config(args, out)
    jobs = [(str(ckpt), e, str(out)) for e in _entries(args)]
    for dest in _fan_out(_stage_one, jobs, args.jobs):
        print(dest)
    return EXIT_OK


# ------------------------------------------------------------------- apnea


def _apnea_one(job):
    ckpt, entry, out, threshold, tst_source, staging_ckpt, hyp_dir = job
    rec, _ = _load_prepared(entry.record)
    probs = apnea.score_events(_cached("apnea", ckpt), rec)
    events = apnea.postprocess(probs, threshold)
    apnea.write_event_csv(events, Path(out) / f"{entry.record_id}.events.csv")
    if tst_source == "labels":
        if entry.stages is None:
            raise UsageError(f"{entry.record_id}: --tst-source labels needs a stage label file")
        stages = read_stage_labels(entry.stages)
    elif hyp_dir is not None:
        stages = Hypnogram.read_csv(_require_file(Path(hyp_dir) / f"{entry.record_id}.hypnogram.csv", "hypnogram")).stages
    else:
        stages = stage_night(_cached("staging", staging_ckpt), rec).stages
    tst_hours = float(np.sum(np.asarray(stages) != Stage5.WAKE)) * EPOCH_S / 3600.0
    return apnea.compute_ahi(events, tst_hours, entry.record_id)


def cmd_apnea(args) -> int:
    if not 0 < args.threshold < 1:
        raise UsageError("--threshold must lie in (0, 1)")
    ckpt = _require_file(args.checkpoint, "checkpoint")
    apnea.ApneaModel.load(ckpt)
    staging_ckpt = None
    if args.tst_source == "pred" and args.hypnogram_dir is None:
        if args.staging_checkpoint is None:
            raise UsageError("--tst-source pred needs --staging-checkpoint or --hypnogram-dir")
        staging_ckpt = str(_require_file(args.staging_checkpoint, "staging checkpoint"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _log_config(args, out)
    jobs = [
        (str(ckpt), e, str(out), args.threshold, args.tst_source, staging_ckpt, args.hypnogram_dir) for e in _entries(args)
    ]
    reports = _fan_out(_apnea_one, jobs, args.jobs)
    apnea.write_reports(reports, out / "ahi_report.csv")
    for r in reports:
        print(r.csv_line())
    return EXIT_OK


# ------------------------------------------------------------------- train


def _load_training_set(entries: list[ManifestEntry]):
    signals, labels, subjects, events = [], [], [], []
    for e in entries:
        if e.stages is None:
            raise UsageError(f"{e.record_id}: training needs stage labels")
        rec, _ = _load_prepared(e.record)
        signals.append(rec.samples)
        labels.append(read_stage_labels(e.stages))
        subjects.append(e.subject_id)
        events.append(read_events(e.events) if e.events is not None else [])
    return signals, labels, subjects, events


def _write_log(rows, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "fold", "loss", "acc"])
        for r in rows:
            w.writerow([r.step, r.fold, repr(float(r.loss)), repr(float(r.acc))])
    os.replace(tmp, path)


def _train_config(args) -> training.TrainConfig:
    distill = None
    if args.distill:
        distill = training.DistillConfig(args.feature_weight, args.output_weight, args.temperature)
    model = StagingModelConfig.toy() if args.width == "toy" else StagingModelConfig()
    return training.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        crop_epochs=args.crop_epochs,
        lr=args.lr,
        seed=args.seed,
        model=model,
        distill=distill,
        teacher_fidelity=args.teacher_fidelity,
    )


def cmd_train(args) -> int:
    entries = read_manifest(_require_file(args.manifest, "manifest"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _log_config(args, out)
    signals, labels, subjects, events = _load_training_set(entries)
    if args.model == "apnea":
        hz = int(CANONICAL_HZ)
        targets = [apnea.event_targets(ev, x.size // hz) for ev, x in zip(events, signals)]
        cfg = apnea.ApneaTrainConfig(steps=args.steps, lr=args.lr, seed=args.seed)
        rows: list = []
        model = apnea.train_apnea_model(signals, targets, cfg, on_step=rows.append)
        model.save(out / "apnea.ckpt")
        _write_log(rows, out / "run_log.csv")
        print(out / "apnea.ckpt")
        return EXIT_OK
    cfg = _train_config(args)
    data = training.StagingData(signals, labels, subjects)
    teachers = None
    if cfg.distill is not None:
        teachers = {
            i: training.make_synthetic_teacher(data.stages[i], cfg.teacher_fidelity, [cfg.seed, 3, i], cfg.teacher_feat_dim)
            for i in range(len(data))
        }
    folds = training.grouped_kfold(subjects, args.folds, args.seed)
    result = training.train_cv(data, cfg, folds=folds, teachers=teachers)
    for f, model in enumerate(result.models):
        model.save(out / f"fold{f}.ckpt")
    pred_dir = out / "predictions"
    pred_dir.mkdir(exist_ok=True)
    for i, hyp in sorted(result.pooled.items()):
        hyp.to_csv(pred_dir / f"{entries[i].record_id}.hypnogram.csv")
    write_json_atomic(out / "folds.json", {f"fold{f}": members for f, members in enumerate(folds.folds)})
    _write_log(result.log, out / "run_log.csv")
    acc4 = training.pooled_accuracy(result.pooled, data)
    print(f"pooled 4-class accuracy {acc4:.4f}")
    return EXIT_OK


# --------------------------------------------------------------------- CRT


def _group_predicate(spec: str):
    if "=" not in spec:
        raise UsageError("--group must look like field=value, e.g. race=Black")
    field_name, value = spec.split("=", 1)
    keys = {"race": lambda m: m.race.value, "sex": lambda m: m.sex.name.capitalize(), "age": lambda m: stats.age_group(m.age_years)}
    if field_name not in keys:
        raise UsageError(f"--group field must be one of {sorted(keys)}")
    return lambda meta: keys[field_name](meta) == value


def cmd_crt(args) -> int:
    entries = read_manifest(_require_file(args.manifest, "manifest"))
    ckpt = _require_file(args.checkpoint, "checkpoint")
    model = StagingModel.load(ckpt)
    predicate = _group_predicate(args.group)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _log_config(args, out)
    signals, labels, subjects, _ = _load_training_set(entries)
    in_group = []
    for e in entries:
        meta_path = e.meta if e.meta is not None else e.record.with_suffix(".json")
        in_group.append(predicate(sidecar_subject_meta(read_sidecar(meta_path))))
    data = training.StagingData(signals, labels, subjects)
    cfg = training.CrtConfig(group_weight=args.group_weight, epochs=args.epochs, lr=args.lr, seed=args.seed)
    rows: list = []
    before = model.params.checksum("enc.")
    new = training.crt_retrain(model, data, np.arange(len(data)), in_group, cfg, on_step=rows.append)
    after = new.params.checksum("enc.")
    new.save(out / "crt.ckpt")
    _write_log(rows, out / "run_log.csv")
    write_json_atomic(out / "encoder_checksum.json", {"before": before, "after": after, "unchanged": before == after})
    log.info("encoder checksum before %s after %s", before, after)
    print(f"encoder checksum {'unchanged' if before == after else 'CHANGED'}: {after}")
    return EXIT_OK


# ---------------------------------------------------------------- evaluate

SLEEP_FIELDS = ["tst_min", "se_fraction", "sol_min", "waso_min", "rem_latency_min", "rem_duration_min"]


def _num(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "NA"
    return repr(float(v))


def _write_rows(path: Path, header: list[str], rows: list[list]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    os.replace(tmp, path)


def _read_reports(path: Path) -> dict[str, float]:
    out = {}
    if path.is_file():
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                out[row["subject_id"]] = float(row["ahi"])
    return out


def _safe(fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except ValueError:
        return None


def cmd_evaluate(args) -> int:
    pred_dir = Path(args.pred_dir)
    if not pred_dir.is_dir():
        raise FileNotFoundError(f"prediction directory not found: {pred_dir}")
    entries = read_manifest(_require_file(args.manifest, "manifest"))
    hyp_files = {p.name[: -len(".hypnogram.csv")]: p for p in pred_dir.glob("*.hypnogram.csv")}
    if not hyp_files:
        raise FileNotFoundError(f"no *.hypnogram.csv predictions in {pred_dir}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _log_config(args, out)
    pred_ahi = _read_reports(pred_dir / "ahi_report.csv")

    rows, subj_acc, metas = [], {}, {}
    pooled_p5, pooled_t5 = [], []
    pairs: dict[str, list[tuple[float, float]]] = {k: [] for k in SLEEP_FIELDS}
    ahi_pairs = []
    svg_dir = out / "figures"
    svg_dir.mkdir(exist_ok=True)
    for e in entries:
        if e.record_id not in hyp_files:
            continue
        if e.stages is None:
            raise UsageError(f"{e.record_id}: evaluation needs stage labels")
        hyp = Hypnogram.read_csv(hyp_files[e.record_id])
        truth = read_stage_labels(e.stages)
        n = min(truth.size, hyp.n_epochs)
        p5, t5 = hyp.stages[:n], truth[:n]
        p4, t4 = hyp.stages4()[:n], collapse_labels(t5)
        pooled_p5.append(p5)
        pooled_t5.append(t5)
        acc4 = metrics.epoch_accuracy(p4, t4)
        acc5 = metrics.epoch_accuracy(p5, t5)
        sm_p = metrics.sleep_metrics(p5)
        sm_t = metrics.sleep_metrics(t5)
        for k in SLEEP_FIELDS:
            a, b = getattr(sm_p, k), getattr(sm_t, k)
            if a is not None and b is not None:
                pairs[k].append((a, b))
        true_ahi = None
        if e.events is not None and sm_t.tst_min > 0:
            true_ahi = len(read_events(e.events)) / (sm_t.tst_min / 60.0)
        p_ahi = pred_ahi.get(e.record_id)
        if p_ahi is not None and true_ahi is not None:
            ahi_pairs.append((p_ahi, true_ahi))
        meta_path = e.meta if e.meta is not None else e.record.with_suffix(".json")
        if meta_path.is_file():
            side = read_sidecar(meta_path)
            if "age" in side:
                metas[e.subject_id] = sidecar_subject_meta(side)
        subj_acc.setdefault(e.subject_id, []).append(acc4)
        rows.append(
            [e.record_id, e.subject_id, _num(acc4), _num(acc5), _num(_safe(metrics.cohens_kappa, p4, t4)), _num(_safe(metrics.cohens_kappa, p5, t5))]
            + [_num(getattr(sm_p, k)) for k in SLEEP_FIELDS]
            + [_num(getattr(sm_t, k)) for k in SLEEP_FIELDS]
            + [_num(p_ahi), _num(true_ahi)]
        )
        plots.write_svg(plots.hypnogram_svg(p5, t5, e.record_id), svg_dir / f"hypnogram_{e.record_id}.svg")
    if not rows:
        raise UsageError("no prediction matches a manifest record")
    header = ["record_id", "subject_id", "acc4", "acc5", "kappa4", "kappa5"]
    header += [f"pred_{k}" for k in SLEEP_FIELDS] + [f"true_{k}" for k in SLEEP_FIELDS] + ["pred_ahi", "true_ahi"]
    _write_rows(out / "per_record.csv", header, rows)

    p5 = np.concatenate(pooled_p5)
    t5 = np.concatenate(pooled_t5)
    p4, t4 = collapse_labels(p5), collapse_labels(t5)
    cm5 = metrics.confusion(p5, t5, 5)
    cm4 = metrics.confusion(p4, t4, 4)
    _write_rows(out / "confusion_5class.csv", ["truth\\pred", "W", "N1", "N2", "N3", "REM"],
                [[n] + row for n, row in zip(["W", "N1", "N2", "N3", "REM"], cm5.tolist())])
    _write_rows(out / "confusion_4class.csv", ["truth\\pred", "W", "L", "D", "REM"],
                [[n] + row for n, row in zip(["W", "L", "D", "REM"], cm4.tolist())])

    per_subject = {s: float(np.mean(v)) for s, v in subj_acc.items()}
    summary = {
        "n_records": len(rows),
        "n_subjects": len(per_subject),
        "pooled_acc4": metrics.epoch_accuracy(p4, t4),
        "pooled_acc5": metrics.epoch_accuracy(p5, t5),
        "kappa4": _safe(metrics.cohens_kappa, p4, t4),
        "kappa5": _safe(metrics.cohens_kappa, p5, t5),
        "subject_acc4_mean": float(np.mean(list(per_subject.values()))),
        "subject_acc4_std": float(np.std(list(per_subject.values()))),
        "pearson_sided": args.sided,
        "sleep_metrics": {},
    }
    for k, vals in pairs.items():
        entry = {"n": len(vals)}
        if len(vals) >= 3:
            a = np.array(vals)
            r = _safe(metrics.pearson_r_p, a[:, 0], a[:, 1], args.sided)
            entry.update(r=r[0] if r else None, p=r[1] if r else None)
            plots.write_svg(plots.scatter_svg(a[:, 0], a[:, 1], k), svg_dir / f"scatter_{k}.svg")
        summary["sleep_metrics"][k] = entry
    if ahi_pairs:
        a = np.array(ahi_pairs)
        ahi = {"n": len(ahi_pairs)}
        icc = _safe(metrics.icc_2_1, a)
        if icc:
            ahi.update(icc=icc[0], icc_ci_low=icc[1], icc_ci_high=icc[2])
        sens, spec = metrics.binary_screen(a[:, 0], a[:, 1], 5.0)
        ahi.update(sensitivity_ahi5=None if math.isnan(sens) else sens, specificity_ahi5=None if math.isnan(spec) else spec)
        ahi["auroc_ahi5"] = _safe(metrics.auroc, a[:, 0], a[:, 1] > 5.0)
        sev = [apnea.Severity.from_ahi(v).value for v in a[:, 0]]
        sev_t = [apnea.Severity.from_ahi(v).value for v in a[:, 1]]
        ahi["severity_agreement"] = float(np.mean([x == y for x, y in zip(sev, sev_t)]))
        names = [s.value for s in apnea.Severity]
        _write_rows(out / "severity_confusion.csv", ["truth\\pred"] + names,
                    [[t] + [sum(1 for x, y in zip(sev, sev_t) if y == t and x == p) for p in names] for t in names])
        plots.write_svg(plots.scatter_svg(a[:, 0], a[:, 1], "AHI", "events/h"), svg_dir / "scatter_ahi.svg")
        summary["ahi"] = ahi
    if metas and all(s in metas for s in per_subject):
        gaps = stats.fairness_gaps(per_subject, metas)
        gaps.to_csv(out / "gaps.csv")
        summary["gaps"] = {name: {"mean": d.mean, "std": d.std} for name, d in gaps.demographics.items()}
    write_json_atomic(out / "summary.json", _json_safe(summary))
    print(f"pooled 4-class accuracy {summary['pooled_acc4']:.4f} over {len(rows)} records")
    return EXIT_OK


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


# ------------------------------------------------------------------ report


def cmd_report(args) -> int:
    eval_dir = Path(args.eval_dir)
    summary = json.loads(_require_file(eval_dir / "summary.json", "evaluation summary").read_text())
    per_record = _require_file(eval_dir / "per_record.csv", "per-record metrics")
    entries = {e.record_id: e for e in read_manifest(_require_file(args.manifest, "manifest"))}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _log_config(args, out)
    with open(per_record, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    # one row per subject: average their records
    by_subject: dict[str, list[dict]] = {}
    metas = {}
    for row in rows:
        e = entries[row["record_id"]]
        by_subject.setdefault(e.subject_id, []).append(row)
        meta_path = e.meta if e.meta is not None else e.record.with_suffix(".json")
        metas[e.subject_id] = sidecar_subject_meta(read_sidecar(meta_path))
    subjects = sorted(by_subject)
    variables = sorted({v for m in metas.values() for v in (m.comorbidities | m.medications)})
    age = np.array([metas[s].age_years for s in subjects])
    sex = np.array([int(metas[s].sex) for s in subjects], dtype=float)
    reg_rows = []
    for var in variables:
        flag = np.array([1.0 if var in (metas[s].comorbidities | metas[s].medications) else 0.0 for s in subjects])
        X = stats.design_matrix(flag, age, sex)
        vifs = stats.vif(X)
        for metric in SLEEP_FIELDS:
            vals = []
            for s in subjects:
                v = [float(r[f"pred_{metric}"]) for r in by_subject[s] if r[f"pred_{metric}"] != "NA"]
                vals.append(float(np.mean(v)) if v else math.nan)
            y = np.array(vals)
            ok = np.isfinite(y)
            try:
                res = stats.ols_fit(y[ok], X[ok])
            except (stats.RankDeficient, stats.TooFew):
                reg_rows.append([metric, var, int(flag.sum())] + ["NA"] * 6 + [_num(float(np.max(vifs)))])
                continue
            reg_rows.append(
                [metric, var, int(flag[ok].sum())]
                + [_num(b) for b in res.betas]
                + [_num(res.p_values[1]), _num(res.r_squared)]
                + [_num(float(np.max(vifs)))]
            )
    _write_rows(out / "regressions.csv",
                ["metric", "variable", "n_with", "beta0", "beta_variable", "beta_age", "beta_sex", "p_variable", "r2", "max_vif"],
                reg_rows)
    lines = [
        "# Evaluation report",
        "",
        f"- records: {summary['n_records']}, subjects: {summary['n_subjects']}",
        f"- pooled accuracy: 4-class {summary['pooled_acc4']:.4f}, 5-class {summary['pooled_acc5']:.4f}",
        f"- kappa: 4-class {_fmt(summary.get('kappa4'))}, 5-class {_fmt(summary.get('kappa5'))}",
        f"- per-subject 4-class accuracy: {summary['subject_acc4_mean']:.4f} ± {summary['subject_acc4_std']:.4f}",
        f"- Pearson p-values are {summary['pearson_sided']}-sided",
    ]
    for k, v in summary.get("sleep_metrics", {}).items():
        lines.append(f"- {k}: r = {_fmt(v.get('r'))}, p = {_fmt(v.get('p'))} (n = {v['n']})")
    if "ahi" in summary:
        a = summary["ahi"]
        lines.append(
            f"- AHI: ICC {_fmt(a.get('icc'))} [{_fmt(a.get('icc_ci_low'))}, {_fmt(a.get('icc_ci_high'))}], "
            f"severity agreement {_fmt(a.get('severity_agreement'))}, AUROC(AHI>5) {_fmt(a.get('auroc_ahi5'))}"
        )
    for name, g in summary.get("gaps", {}).items():
        lines.append(f"- {name} accuracy gap: {_fmt(g['mean'])} ± {_fmt(g['std'])}")
    lines.append(f"- regressions: {len(reg_rows)} fits over {len(variables)} variables (regressions.csv)")
    text = "\n".join(lines) + "\n"
    (out / "report.md.tmp").write_text(text, encoding="utf-8")
    os.replace(out / "report.md.tmp", out / "report.md")
    print(text, end="")
    return EXIT_OK


def _fmt(v) -> str:
    return "NA" if v is None else f"{v:.4f}"


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="breathstage", description="Sleep staging and apnea scoring from breathing signals.")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("spec_file")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    def add_inputs(p):
        p.add_argument("inputs", nargs="*", help="record files (.csv with sidecar, or .edf)")
        p.add_argument("--manifest", default=None)
        p.add_argument("--out", required=True)
        p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("stage", help="write a hypnogram per record")
    p.add_argument("--checkpoint", required=True)
    add_inputs(p)
    p.set_defaults(func=cmd_stage)

    p = sub.add_parser("apnea", help="score events and AHI per record")
    p.add_argument("--checkpoint", required=True)
    add_inputs(p)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--tst-source", choices=["pred", "labels"], default="pred")
    p.add_argument("--staging-checkpoint", default=None)
    p.add_argument("--hypnogram-dir", default=None)
    p.set_defaults(func=cmd_apnea)

    p = sub.add_parser("train", help="grouped k-fold training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", choices=["staging", "apnea"], default="staging")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--folds", type=int, default=4)
    p.add_argument("--epochs", type=int, default=training.TrainConfig.epochs)
    p.add_argument("--steps", type=int, default=apnea.ApneaTrainConfig.steps, help="apnea model steps")
    p.add_argument("--batch-size", type=int, default=training.TrainConfig.batch_size)
    p.add_argument("--crop-epochs", type=int, default=training.TrainConfig.crop_epochs)
    p.add_argument("--lr", type=float, default=training.TrainConfig.lr)
    p.add_argument("--width", choices=["toy", "full"], default="toy")
    p.add_argument("--distill", action="store_true")
    p.add_argument("--feature-weight", type=float, default=1.0)
    p.add_argument("--output-weight", type=float, default=1.0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--teacher-fidelity", type=float, default=0.95)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("crt", help="retrain the head with group-weighted resampling")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--group", default="race=Black")
    p.add_argument("--group-weight", type=int, default=8)
    p.add_argument("--epochs", type=int, default=training.CrtConfig.epochs)
    p.add_argument("--lr", type=float, default=training.CrtConfig.lr)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_crt)

    p = sub.add_parser("evaluate", help="metrics, figures and gap report")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sided", choices=["one", "two"], default="two")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="cohort regressions and a text summary")
    p.add_argument("--eval-dir", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


IO_ERRORS = (OSError, CheckpointError, SignalIOError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        _apply_env(parser)
    except UsageError as exc:
        print(f"breathstage: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TooShort as exc:
        print(f"breathstage: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except IO_ERRORS as exc:
        print(f"breathstage: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"breathstage: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
