"""Subject-grouped cross-validation, distillation from a teacher, and
head-only classifier retraining with group-weighted resampling."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from breathstage import nn
from breathstage.nn import functional as F
from breathstage.signal_io import EPOCH_SAMPLES
from breathstage.staging import N_STAGES, Hypnogram, StagingModel, StagingModelConfig

log = logging.getLogger(__name__)


class TooFewSubjects(ValueError):
    pass


class EmptyGroup(ValueError):
    pass


# ------------------------------------------------------------------- folds


@dataclass
class FoldSplit:
    folds: list[list[str]]

    @property
    def k(self) -> int:
        return len(self.folds)

    def fold_of(self, subject_id: str) -> int:
        for i, fold in enumerate(self.folds):
            if subject_id in fold:
                return i
        raise KeyError(subject_id)

    def test_indices(self, subject_ids: Sequence[str], fold: int) -> np.ndarray:
        members = set(self.folds[fold])
        return np.array([i for i, s in enumerate(subject_ids) if s in members], dtype=np.int64)

    def train_indices(self, subject_ids: Sequence[str], fold: int) -> np.ndarray:
        members = set(self.folds[fold])
        return np.array([i for i, s in enumerate(subject_ids) if s not in members], dtype=np.int64)


def grouped_kfold(subjects: Sequence[str], k: int = 4, seed=0) -> FoldSplit:
    """Shuffle the distinct subjects and deal them round-robin into ``k`` folds.

    ``subjects`` may list a subject once per record; every record of a subject
    lands in the same fold and fold sizes differ by at most one subject.
    """
    unique = sorted(set(subjects))
    if len(unique) < k:
        raise TooFewSubjects(f"{len(unique)} subjects for {k} folds")
    order = nn.make_rng(seed).permutation(len(unique))
    folds = [[] for _ in range(k)]
    for pos, idx in enumerate(order):
        folds[pos % k].append(unique[idx])
    return FoldSplit([sorted(f) for f in folds])


# ------------------------------------------------------------ distillation


@dataclass
class DistillConfig:
    feature_weight: float = 1.0
    output_weight: float = 1.0
    temperature: float = 1.0

    def __post_init__(self):
        if self.feature_weight < 0 or self.output_weight < 0:
            raise ValueError("distillation weights must be nonnegative")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


@dataclass
class TeacherOutputs:
    logits: np.ndarray  # (E, 5)
    feats: np.ndarray  # (E, D)


def make_synthetic_teacher(
    stages,
    fidelity: float,
    rng,
    feat_dim: int = 32,
    margin: float = 4.0,
    temperature: float = 1.0,
    embedding_seed: int = 7,
) -> TeacherOutputs:
    """Stand-in for an EEG teacher.

    Each epoch's teacher class is the true stage with probability ``fidelity``,
    otherwise a uniformly chosen wrong stage. Logits put ``margin/temperature``
    on that class. Features are a fixed per-stage embedding of the *true* stage.
    """
    if not 0 <= fidelity <= 1:
        raise ValueError("fidelity must lie in [0, 1]")
    rng = nn.make_rng(rng)
    stages = np.asarray(stages, dtype=np.int64)
    wrong = (stages + rng.integers(1, N_STAGES, size=stages.size)) % N_STAGES
    chosen = np.where(rng.random(stages.size) < fidelity, stages, wrong)
    logits = F.one_hot(chosen, N_STAGES) * (margin / temperature)
    table = np.random.default_rng(embedding_seed).standard_normal((N_STAGES, feat_dim))
    return TeacherOutputs(logits, table[stages])


def distill_loss(student_feats, teacher_feats, student_logits, teacher_logits, labels, cfg: DistillConfig, proj=None):
    """``CE(student, labels) + λf·L2(feats) + λo·CE(student/τ, softmax(teacher/τ))``.

    ``proj`` (D_teacher, D_student) maps student features into the teacher's
    space before the L2 term. Teacher tensors are constants: no gradient is
    returned for them. Returns ``(total, parts, grads)`` where ``grads`` has
    ``feats``, ``logits`` and, with a projection, ``proj``.
    """
    student_logits = np.asarray(student_logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if student_logits.shape[:-1] != labels.shape:
        raise F.ShapeMismatch(f"logits {student_logits.shape} vs labels {labels.shape}")
    ce, d_logits = F.softmax_cross_entropy(student_logits, F.one_hot(labels, student_logits.shape[-1]))
    parts = {"ce": ce, "feature": 0.0, "output": 0.0}
    grads = {"feats": np.zeros_like(student_feats), "logits": d_logits}
    if cfg.feature_weight > 0:
        mapped = student_feats @ proj.T if proj is not None else student_feats
        l2, d_mapped, _ = F.l2_feature_loss(mapped, teacher_feats)
        parts["feature"] = l2
        d_mapped = cfg.feature_weight * d_mapped
        if proj is not None:
            grads["feats"] = d_mapped @ proj
            grads["proj"] = d_mapped.reshape(-1, d_mapped.shape[-1]).T @ student_feats.reshape(-1, student_feats.shape[-1])
        else:
            grads["feats"] = d_mapped
    elif proj is not None:
        grads["proj"] = np.zeros_like(proj)
    if cfg.output_weight > 0:
        tau = cfg.temperature
        soft = F.softmax(np.asarray(teacher_logits, dtype=np.float64) / tau)
        kd, d_scaled = F.softmax_cross_entropy(student_logits / tau, soft)
        parts["output"] = kd
        grads["logits"] = grads["logits"] + cfg.output_weight * d_scaled / tau
    total = ce + cfg.feature_weight * parts["feature"] + cfg.output_weight * parts["output"]
    return total, parts, grads


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 2
    crop_epochs: int = 80
    lr: float = 5e-4
    clip_norm: float = 5.0
    seed: int = 0
    model: StagingModelConfig = field(default_factory=StagingModelConfig.toy)
    distill: DistillConfig | None = None
    teacher_fidelity: float = 0.95
    teacher_feat_dim: int = 32

    def to_dict(self) -> dict:
        out = asdict(self)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if "model" in data and isinstance(data["model"], dict):
            data["model"] = StagingModelConfig.from_dict(data["model"])
        if data.get("distill") is not None and isinstance(data["distill"], dict):
            data["distill"] = DistillConfig(**data["distill"])
        return cls(**data)


@dataclass
class StagingData:
    """Prepared (10 Hz, normalized) signals with aligned stage labels."""

    signals: list[np.ndarray]
    stages: list[np.ndarray]
    subject_ids: list[str]

    def __post_init__(self):
        for i, (x, y) in enumerate(zip(self.signals, self.stages)):
            n = min(x.size // EPOCH_SAMPLES, y.size)
            self.signals[i] = np.asarray(x[: n * EPOCH_SAMPLES], dtype=np.float64)
            self.stages[i] = np.asarray(y[:n], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.signals)

    @classmethod
    def from_cohort(cls, cohort) -> "StagingData":
        from breathstage.signal_io import prepare

        return cls(
            [prepare(s.record).samples for s in cohort],
            [s.labels.stages for s in cohort],
            [s.meta.subject_id for s in cohort],
        )


@dataclass
class LogRow:
    step: int
    fold: int
    loss: float
    acc: float


def _sample_crops(data: StagingData, idx: Sequence[int], crop: int, rng: np.random.Generator):
    xs, ys, spans = [], [], []
    n_ep = min(data.stages[i].size for i in idx)
    crop = min(crop, n_ep)
    for i in idx:
        start = int(rng.integers(0, data.stages[i].size - crop + 1))
        xs.append(data.signals[i][start * EPOCH_SAMPLES : (start + crop) * EPOCH_SAMPLES])
        ys.append(data.stages[i][start : start + crop])
        spans.append((int(i), start))
    return np.stack(xs), np.stack(ys), spans


def train_model(
    data: StagingData,
    train_idx: Sequence[int],
    cfg: TrainConfig,
    fold: int = 0,
    teachers: dict[int, TeacherOutputs] | None = None,
    on_step: Callable[[LogRow], None] | None = None,
) -> StagingModel:
    """Train a staging model from scratch on random crops of ``train_idx`` records."""
    rng = nn.make_rng([cfg.seed, fold])
    model = StagingModel.create(cfg.model, rng)
    aux = None
    params = model.params
    if cfg.distill is not None and cfg.distill.feature_weight > 0:
        aux = nn.ParameterStore({"proj": nn.he_init((cfg.teacher_feat_dim, cfg.model.attn_dim), rng)})
    opt = nn.Adam(params, lr=cfg.lr, clip_norm=cfg.clip_norm)
    aux_opt = nn.Adam(aux, lr=cfg.lr) if aux is not None else None
    train_idx = np.asarray(train_idx, dtype=np.int64)
    steps_per_epoch = math.ceil(train_idx.size / cfg.batch_size)
    step = 0
    for _ in range(cfg.epochs):
        order = train_idx[rng.permutation(train_idx.size)]
        for b in range(steps_per_epoch):
            batch = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            if batch.size == 0:
                continue
            x, y, spans = _sample_crops(data, batch, cfg.crop_epochs, rng)
            params.zero_grad()
            logits, feats, cache = model.forward(x)
            if cfg.distill is not None:
                t_logits = np.stack([teachers[i].logits[s : s + y.shape[1]] for i, s in spans])
                t_feats = np.stack([teachers[i].feats[s : s + y.shape[1]] for i, s in spans])
                if aux is not None:
                    aux.zero_grad()
                loss, _, grads = distill_loss(
                    feats, t_feats, logits, t_logits, y, cfg.distill, aux["proj"] if aux is not None else None
                )
                model.backward(grads["logits"], cache, dfeats=grads["feats"])
                if aux is not None:
                    aux.grads["proj"] += grads["proj"]
                    aux_opt.step()
            else:
                loss, dlogits = F.softmax_cross_entropy(logits, F.one_hot(y, N_STAGES))
                model.backward(dlogits, cache)
            opt.step()
            step += 1
            acc = float(np.mean(np.argmax(logits, axis=-1) == y))
            row = LogRow(step, fold, float(loss), acc)
            if on_step is not None:
                on_step(row)
    return model


@dataclass
class CvResult:
    models: list[StagingModel]
    pooled: dict[int, Hypnogram]
    log: list[LogRow]
    folds: FoldSplit


def predict_records(model: StagingModel, data: StagingData, idx: Sequence[int]) -> dict[int, Hypnogram]:
    out = {}
    for i in idx:
        probs = model.predict_proba(data.signals[i][None, :])[0]
        out[int(i)] = Hypnogram.from_probs(probs)
    return out


def train_cv(
    data: StagingData,
    cfg: TrainConfig,
    folds: FoldSplit | None = None,
    k: int = 4,
    teachers: dict[int, TeacherOutputs] | None = None,
) -> CvResult:
    """Train on k-1 folds, predict the held-out fold, repeat for every fold."""
    folds = folds or grouped_kfold(data.subject_ids, k, cfg.seed)
    models, rows = [], []
    pooled: dict[int, Hypnogram] = {}
    for f in range(folds.k):
        train_idx = folds.train_indices(data.subject_ids, f)
        test_idx = folds.test_indices(data.subject_ids, f)
        model = train_model(data, train_idx, cfg, fold=f, teachers=teachers, on_step=rows.append)
        preds = predict_records(model, data, test_idx)
        overlap = pooled.keys() & preds.keys()
        if overlap:
            raise RuntimeError(f"records {sorted(overlap)} predicted in two folds")
        pooled.update(preds)
        models.append(model)
        log.info("fold %d: trained on %d records, predicted %d", f, train_idx.size, test_idx.size)
    if sorted(pooled) != list(range(len(data))):
        raise RuntimeError("pooled predictions do not cover every record exactly once")
    return CvResult(models, pooled, rows, folds)


def pooled_accuracy(pooled: dict[int, Hypnogram], data: StagingData, four_class: bool = True) -> float:
    from breathstage.stages import collapse_labels

    hits = total = 0
    for i, hyp in pooled.items():
        truth = data.stages[i]
        pred = hyp.stages4() if four_class else hyp.stages
        if four_class:
            truth = collapse_labels(truth)
        hits += int(np.sum(pred == truth))
        total += truth.size
    return hits / total


# --------------------------------------------------------------------- CRT


@dataclass
class CrtConfig:
    group_weight: int = 8
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if int(self.group_weight) != self.group_weight or self.group_weight < 1:
            raise ValueError("group_weight must be a positive integer")


def crt_sampling_pool(in_group: Sequence[bool], group_weight: int) -> np.ndarray:
    """Record indices with in-group records repeated ``group_weight`` times."""
    return np.concatenate(
        [np.full(group_weight if g else 1, i, dtype=np.int64) for i, g in enumerate(in_group)]
    )


def crt_epoch_sample(pool: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` draws without replacement from the weighted pool."""
    return pool[rng.permutation(pool.size)[: min(n, pool.size)]]


def crt_retrain(
    model: StagingModel,
    data: StagingData,
    train_idx: Sequence[int],
    in_group: Sequence[bool],
    cfg: CrtConfig,
    on_step: Callable[[LogRow], None] | None = None,
) -> StagingModel:
    """Retrain only ``head.*`` on a group-weighted resample; the encoder is frozen.

    ``in_group[j]`` marks whether ``train_idx[j]`` belongs to the upweighted
    group. Each retraining epoch draws ``len(train_idx)`` records without
    replacement from a pool where in-group records appear ``group_weight``
    times, so their selection probability is ``group_weight`` times higher.
    """
    train_idx = np.asarray(train_idx, dtype=np.int64)
    in_group = np.asarray(in_group, dtype=bool)
    if not in_group.any():
        raise EmptyGroup("group predicate matches no training record")
    new = StagingModel(model.config, model.params.copy())
    enc_before = new.params.checksum("enc.")
    # encoder is frozen, so its features are computed once per record
    feats = {int(i): new.encode(data.signals[i][None, :], keep_cache=False)[0] for i in train_idx}
    head_paths = new.params.paths("head.")
    opt = nn.Adam(new.params, lr=cfg.lr, paths=head_paths)
    rng = nn.make_rng([cfg.seed, 1])
    pool = crt_sampling_pool(in_group, int(cfg.group_weight))
    step = 0
    for _ in range(cfg.epochs):
        chosen = train_idx[crt_epoch_sample(pool, train_idx.size, rng)]
        for b in range(0, chosen.size, cfg.batch_size):
            batch = chosen[b : b + cfg.batch_size]
            n_ep = min(data.stages[i].size for i in batch)
            f = np.concatenate([feats[int(i)][:, :n_ep] for i in batch])
            y = np.stack([data.stages[i][:n_ep] for i in batch])
            new.params.zero_grad()
            logits, caches = new.head(f)
            loss, dlogits = F.softmax_cross_entropy(logits, F.one_hot(y, N_STAGES))
            new.head_backward(dlogits, caches)
            opt.step()
            step += 1
            if on_step is not None:
                on_step(LogRow(step, 0, loss, float(np.mean(np.argmax(logits, -1) == y))))
    if new.params.checksum("enc.") != enc_before:
        raise AssertionError("encoder parameters changed during CRT")
    return new
