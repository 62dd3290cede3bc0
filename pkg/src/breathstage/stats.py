"""Cohort analyses: adjusted OLS effects, collinearity screening and
demographic accuracy gaps."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats

from breathstage.signal_io import Race, Sex, SubjectMeta, _write_atomic

VIF_FLAG = 10.0


class RankDeficient(ValueError):
    pass


class TooFew(ValueError):
    pass


# ---------------------------------------------------------------------- OLS


@dataclass
class RegressionResult:
    betas: np.ndarray
    std_errors: np.ndarray
    t_stats: np.ndarray
    p_values: np.ndarray
    n: int
    r_squared: float
    residuals: np.ndarray = field(repr=False)


def _qr_solve(y: np.ndarray, X: np.ndarray, rtol: float = 1e-10):
    q, r = np.linalg.qr(X)
    diag = np.abs(np.diag(r))
    if diag.size < X.shape[1] or diag.min() <= rtol * max(diag.max(), 1e-300):
        raise RankDeficient("design matrix columns are linearly dependent")
    beta = np.linalg.solve(r, q.T @ y)
    return beta, r


def design_matrix(variable, age, sex) -> np.ndarray:
    """Columns: intercept, Variable (0/1), Age, Sex (0/1)."""
    variable = np.asarray(variable, dtype=np.float64)
    return np.column_stack([np.ones_like(variable), variable, np.asarray(age, float), np.asarray(sex, float)])


def ols_fit(y, X) -> RegressionResult:
    """Least squares by QR with two-sided t-tests on ``n - p`` degrees of freedom."""
    y = np.asarray(y, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    n, p = X.shape
    if y.shape != (n,):
        raise ValueError(f"y has shape {y.shape}, expected ({n},)")
    if n <= p:
        raise TooFew(f"need more than {p} observations, got {n}")
    beta, r = _qr_solve(y, X)
    resid = y - X @ beta
    df = n - p
    sigma2 = float(resid @ resid) / df
    r_inv = np.linalg.inv(r)
    se = np.sqrt(sigma2 * np.sum(r_inv**2, axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, beta / se, np.sign(beta) * np.inf)
    t = np.where((se == 0) & (beta == 0), 0.0, t)
    pvals = np.clip(2.0 * stats.t.sf(np.abs(t), df), 0.0, 1.0)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return RegressionResult(beta, se, t, pvals, n, r2, resid)


def vif(X, has_intercept: bool = True) -> np.ndarray:
    """Variance inflation per non-intercept column; ``inf`` marks exact collinearity.

    Each column is regressed on the others plus an intercept.
    """
    X = np.asarray(X, dtype=np.float64)
    cols = X[:, 1:] if has_intercept else X
    n, m = cols.shape
    out = np.empty(m)
    ones = np.ones((n, 1))
    for j in range(m):
        target = cols[:, j]
        others = np.hstack([ones, np.delete(cols, j, axis=1)])
        ss_tot = float(np.sum((target - target.mean()) ** 2))
        if ss_tot == 0:
            out[j] = math.inf
            continue
        # least squares tolerates collinearity among the other columns
        beta = np.linalg.lstsq(others, target, rcond=None)[0]
        resid = target - others @ beta
        r2 = 1.0 - float(resid @ resid) / ss_tot
        out[j] = math.inf if r2 >= 1.0 - 1e-12 else 1.0 / (1.0 - r2)
    return out


def vif_flags(values) -> np.ndarray:
    return np.asarray(values) >= VIF_FLAG


# ---------------------------------------------------------- fairness gaps


def age_group(age: float) -> str:
    if age < 40:
        return "Young"
    if age < 60:
        return "Middle"
    return "Senior"


DEMOGRAPHICS: dict[str, tuple[list[str], Callable[[SubjectMeta], str]]] = {
    "sex": (["Male", "Female"], lambda m: "Male" if m.sex == Sex.MALE else "Female"),
    "age": (["Young", "Middle", "Senior"], lambda m: age_group(m.age_years)),
    "race": ([r.value for r in Race], lambda m: Race(m.race).value),
}


@dataclass
class DemographicGaps:
    groups: dict[str, list[float]]
    pairs: dict[tuple[str, str], float | None]
    p_values: dict[tuple[str, str], float | None]

    @property
    def available(self) -> list[float]:
        return [g for g in self.pairs.values() if g is not None]

    @property
    def mean(self) -> float:
        gaps = self.available
        return float(np.mean(gaps)) if gaps else math.nan

    @property
    def std(self) -> float:
        gaps = self.available
        return float(np.std(gaps)) if gaps else math.nan

    def group_mean(self, group: str) -> float | None:
        vals = self.groups.get(group, [])
        return float(np.mean(vals)) if vals else None


@dataclass
class GapReport:
    demographics: dict[str, DemographicGaps]

    def to_csv(self, path) -> None:
        lines = ["demographic,group_a,group_b,mean_a,mean_b,gap,p_value"]
        fmt = lambda v: "NA" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))
        for name, d in self.demographics.items():
            for (a, b), gap in d.pairs.items():
                lines.append(f"{name},{a},{b},{fmt(d.group_mean(a))},{fmt(d.group_mean(b))},{fmt(gap)},{fmt(d.p_values[(a, b)])}")
            lines.append(f"{name},mean,std,,,{fmt(d.mean)},{fmt(d.std)}")
        _write_atomic(path, "\n".join(lines) + "\n")


def fairness_gaps(
    per_subject_accuracy: Mapping[str, float],
    meta: Mapping[str, SubjectMeta],
    demographics: Sequence[str] = ("sex", "age", "race"),
) -> GapReport:
    """Pairwise absolute gaps between subject-weighted group mean accuracies.

    A pair with an empty group is kept with gap ``None``.
    """
    report = {}
    for name in demographics:
        labels, key = DEMOGRAPHICS[name]
        groups: dict[str, list[float]] = {g: [] for g in labels}
        for sid in sorted(per_subject_accuracy):
            groups[key(meta[sid])].append(float(per_subject_accuracy[sid]))
        pairs, pvals = {}, {}
        for a, b in itertools.combinations(labels, 2):
            if groups[a] and groups[b]:
                pairs[(a, b)] = abs(float(np.mean(groups[a])) - float(np.mean(groups[b])))
                try:
                    pvals[(a, b)] = group_mean_test(groups[a], groups[b])
                except TooFew:
                    pvals[(a, b)] = None
            else:
                pairs[(a, b)] = None
                pvals[(a, b)] = None
        report[name] = DemographicGaps(groups, pairs, pvals)
    return GapReport(report)


def group_mean_test(acc_a, acc_b) -> float:
    """Two-sided Welch t-test p-value for equal group means."""
    a = np.asarray(acc_a, dtype=np.float64)
    b = np.asarray(acc_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise TooFew("each group needs at least 2 subjects")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    if va + vb == 0:
        return 1.0 if diff == 0 else 0.0
    t = diff / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    return float(min(1.0, 2.0 * stats.t.sf(abs(t), df)))
