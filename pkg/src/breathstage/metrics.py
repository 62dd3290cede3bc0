"""Epoch agreement, night-level sleep metrics and the statistics used to
compare predicted against reference measurements."""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import optimize, special, stats

from breathstage.stages import Stage5

EPOCH_MIN = 0.5


class LengthMismatch(ValueError):
    pass


class DegenerateMarginals(ValueError):
    pass


class ZeroVariance(ValueError):
    pass


class TooFewSubjects(ValueError):
    pass


class EmptyGroup(ValueError):
    pass


class OneClassOnly(ValueError):
    pass


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise LengthMismatch(f"{pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise LengthMismatch("empty sequences")
    return pred, truth


# ---------------------------------------------------------------- agreement


def epoch_accuracy(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean(pred == truth))


def confusion(pred, truth, n_classes: int | None = None) -> np.ndarray:
    """Counts with rows = truth, columns = prediction."""
    pred, truth = _pair(pred, truth)
    k = n_classes or int(max(pred.max(), truth.max())) + 1
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (truth.astype(np.int64), pred.astype(np.int64)), 1)
    return cm


def cohens_kappa(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    classes = np.union1d(pred, truth)
    n = pred.size
    p_o = float(np.mean(pred == truth))
    p_e = sum(float(np.sum(pred == c)) * float(np.sum(truth == c)) for c in classes) / (n * n)
    if math.isclose(p_e, 1.0):
        if p_o == 1.0:
            return 1.0
        raise DegenerateMarginals("chance agreement is 1 but the sequences differ")
    return (p_o - p_e) / (1.0 - p_e)


# ------------------------------------------------------------ sleep metrics


@dataclass
class SleepMetrics:
    time_in_bed_min: float
    tst_min: float
    se_fraction: float
    sol_min: float
    waso_min: float
    trailing_wake_min: float
    waso_excl_trailing_min: float
    rem_latency_min: float | None
    rem_duration_min: float | None
    no_sleep: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def sleep_metrics(stages, wake: int = Stage5.WAKE, rem: int = Stage5.REM) -> SleepMetrics:
    """Night-level summaries from a per-epoch hypnogram.

    ``waso_min`` counts every Wake epoch after sleep onset, including wake
    after the final sleep epoch; ``waso_excl_trailing_min`` leaves that
    trailing wake out. REM latency is measured from sleep onset. REM fields
    are ``None`` when the night has no REM.
    """
    stages = np.asarray(stages)
    tib = EPOCH_MIN * stages.size
    asleep = np.flatnonzero(stages != wake)
    if asleep.size == 0:
        return SleepMetrics(tib, 0.0, 0.0, tib, 0.0, 0.0, 0.0, None, None, no_sleep=True)
    onset, last = int(asleep[0]), int(asleep[-1])
    tst = EPOCH_MIN * asleep.size
    waso = EPOCH_MIN * int(np.sum(stages[onset:] == wake))
    trailing = EPOCH_MIN * (stages.size - 1 - last)
    rem_idx = np.flatnonzero(stages == rem)
    rem_latency = EPOCH_MIN * (int(rem_idx[0]) - onset) if rem_idx.size else None
    rem_duration = EPOCH_MIN * rem_idx.size if rem_idx.size else None
    return SleepMetrics(
        time_in_bed_min=tib,
        tst_min=tst,
        se_fraction=tst / tib,
        sol_min=EPOCH_MIN * onset,
        waso_min=waso,
        trailing_wake_min=trailing,
        waso_excl_trailing_min=waso - trailing,
        rem_latency_min=rem_latency,
        rem_duration_min=rem_duration,
    )


# -------------------------------------------------------------- correlation


def pearson_r_p(x, y, sided: str = "two") -> tuple[float, float]:
    """Pearson r with a Student-t p-value.

    ``sided="one"`` tests r > 0 against r = 0; ``"two"`` is the usual
    two-tailed test.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise LengthMismatch(f"{x.shape} vs {y.shape}")
    n = x.size
    if n < 3:
        raise TooFewSubjects(f"need at least 3 pairs, got {n}")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ZeroVariance("correlation is undefined for a constant variable")
    r = float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))
    df = n - 2
    if abs(r) == 1.0:
        t = math.copysign(math.inf, r)
    else:
        t = r * math.sqrt(df / (1.0 - r * r))
    if sided == "one":
        p = float(stats.t.sf(t, df))
    elif sided == "two":
        p = float(2.0 * stats.t.sf(abs(t), df))
    else:
        raise ValueError(f"sided must be 'one' or 'two', got {sided!r}")
    return r, min(p, 1.0)


def f_ppf(q: float, d1: float, d2: float) -> float:
    """F-distribution quantile by root-finding on the regularized incomplete beta."""
    if not 0 < q < 1:
        raise ValueError("quantile must lie in (0, 1)")
    # CDF of F(d1, d2) at x is I_{d1 x / (d1 x + d2)}(d1/2, d2/2); solve for the beta argument
    z = optimize.brentq(lambda u: special.betainc(d1 / 2, d2 / 2, u) - q, 0.0, 1.0, xtol=1e-300, rtol=1e-15, maxiter=500)
    return d2 * z / (d1 * (1.0 - z))


def icc_2_1(pairs, alpha: float = 0.05) -> tuple[float, float, float]:
    """Two-way random-effects, absolute-agreement, single-measurement ICC.

    ``pairs`` is (n_subjects, k_raters). Returns ``(icc, ci_low, ci_high)``
    with the F-based confidence interval for this form.
    """
    y = np.asarray(pairs, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] < 2:
        raise ValueError("pairs must be an (n, k>=2) table")
    n, k = y.shape
    if n < 5:
        raise TooFewSubjects(f"need at least 5 subjects, got {n}")
    grand = y.mean()
    row_means = y.mean(axis=1)
    col_means = y.mean(axis=0)
    msr = k * float(np.sum((row_means - grand) ** 2)) / (n - 1)
    msc = n * float(np.sum((col_means - grand) ** 2)) / (k - 1)
    resid = y - row_means[:, None] - col_means[None, :] + grand
    mse = float(np.sum(resid**2)) / ((n - 1) * (k - 1))
    denom = msr + (k - 1) * mse + k * (msc - mse) / n
    if denom == 0:
        raise ZeroVariance("all measurements are identical")
    icc = (msr - mse) / denom
    if mse == 0:
        return icc, icc, icc
    a = k * icc / (n * (1 - icc))
    b = 1 + k * icc * (n - 1) / (n * (1 - icc))
    v = (a * msc + b * mse) ** 2 / ((a * msc) ** 2 / (k - 1) + (b * mse) ** 2 / ((n - 1) * (k - 1)))
    f_up = f_ppf(1 - alpha / 2, n - 1, v)
    f_lo = f_ppf(1 - alpha / 2, v, n - 1)
    low = n * (msr - f_up * mse) / (f_up * (k * msc + (k * n - k - n) * mse) + n * msr)
    high = n * (f_lo * msr - mse) / (k * msc + (k * n - k - n) * mse + n * f_lo * msr)
    return icc, low, high


# -------------------------------------------------------------- rank tests

EXACT_MAX_N = 12


def _u_statistic(a: np.ndarray, b: np.ndarray) -> float:
    diff = a[:, None] - b[None, :]
    return float(np.sum(diff > 0) + 0.5 * np.sum(diff == 0))


def mann_whitney_u(a, b, method: str = "auto") -> tuple[float, float]:
    """``U`` for sample ``a`` and the one-sided p-value for "a tends to exceed b".

    Small samples (n_a + n_b <= 12) enumerate every split of the pooled
    values, which handles ties exactly. Larger ones use the normal
    approximation with tie and continuity corrections. ``method`` forces
    either path (``"exact"`` or ``"asymptotic"``).
    """
    if method not in ("auto", "exact", "asymptotic"):
        raise ValueError(f"unknown method {method!r}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise EmptyGroup("both samples must be non-empty")
    u = _u_statistic(a, b)
    na, nb = a.size, b.size
    if method == "exact" or (method == "auto" and na + nb <= EXACT_MAX_N):
        pooled = np.concatenate([a, b])
        count = total = 0
        for idx in itertools.combinations(range(pooled.size), na):
            mask = np.zeros(pooled.size, dtype=bool)
            mask[list(idx)] = True
            total += 1
            if _u_statistic(pooled[mask], pooled[~mask]) >= u - 1e-9:
                count += 1
        return u, count / total
    n = na + nb
    _, tie_counts = np.unique(np.concatenate([a, b]), return_counts=True)
    tie_term = float(np.sum(tie_counts**3 - tie_counts)) / (n * (n - 1))
    sigma = math.sqrt(na * nb / 12.0 * ((n + 1) - tie_term))
    if sigma == 0:
        return u, 1.0
    z = (u - na * nb / 2.0 - 0.5) / sigma
    return u, float(special.ndtr(-z))


# ------------------------------------------------------------ screening


def binary_screen(pred_ahi, true_ahi, cutoff: float = 5.0) -> tuple[float, float]:
    """Sensitivity and specificity for "AHI > cutoff". NaN when a class is absent."""
    pred, truth = _pair(np.asarray(pred_ahi, dtype=float), np.asarray(true_ahi, dtype=float))
    p = pred > cutoff
    t = truth > cutoff
    sens = float(np.sum(p & t) / np.sum(t)) if t.any() else math.nan
    spec = float(np.sum(~p & ~t) / np.sum(~t)) if (~t).any() else math.nan
    return sens, spec


def auroc(scores, labels) -> float:
    """Probability a random positive outscores a random negative; ties count half."""
    scores, labels = _pair(np.asarray(scores, dtype=float), np.asarray(labels).astype(bool))
    pos, neg = scores[labels], scores[~labels]
    if pos.size == 0 or neg.size == 0:
        raise OneClassOnly("AUROC needs both positive and negative labels")
    ranks = stats.rankdata(np.concatenate([pos, neg]))
    return float((ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2) / (pos.size * neg.size))
