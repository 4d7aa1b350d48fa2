"""Evaluation statistics for regression prognosis models.

Covers the coefficient of determination, Pearson correlation, MSE, the
dependent-correlation significance test (Steiger's Z1*), residual histograms
and cross-validation aggregation.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats


class MetricError(ValueError):
    pass


def _pair(y, yhat, min_len: int = 2) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape:
        raise MetricError(f"length mismatch: {y.size} vs {yhat.size}")
    if y.size < min_len:
        raise MetricError(f"need at least {min_len} samples, got {y.size}")
    return y, yhat


def r_squared(y, yhat) -> float:
    """Coefficient of determination ``1 - SS_res / SS_tot``; may be negative."""
    y, yhat = _pair(y, yhat)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise MetricError("undefined total sum of squares (constant y)")
    ss_res = float(np.sum((y - yhat) ** 2))
    return 1.0 - ss_res / ss_tot


def pearson_r(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    dy = y - y.mean()
    dp = yhat - yhat.mean()
    sy = math.sqrt(float(dy @ dy))
    sp = math.sqrt(float(dp @ dp))
    if sy == 0.0 or sp == 0.0:
        raise MetricError("correlation undefined for constant input")
    r = float(dy @ dp) / (sy * sp)
    return max(-1.0, min(1.0, r))


def mse(y, yhat) -> float:
    y, yhat = _pair(y, yhat, min_len=1)
    return float(np.mean((y - yhat) ** 2))


def fisher_z(r: float) -> float:
    if not abs(r) < 1.0:
        raise MetricError(f"fisher_z needs |r| < 1, got {r}")
    return 0.5 * math.log((1.0 + r) / (1.0 - r))


@dataclass
class SteigerResult:
    model_a: str
    model_b: str
    r12: float
    r13: float
    r23: float
    n: int
    z: float
    p_two_tailed: float

    def stars(self) -> str:
        return significance_stars(self.p_two_tailed)


def significance_stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


def steiger_z1(
    r12: float,
    r13: float,
    r23: float,
    n: int,
    model_a: str = "a",
    model_b: str = "b",
) -> SteigerResult:
    """Compare two dependent correlations that share variable 1.

    Variable 1 is the ground truth, 2 and 3 are the predictions of models A
    and B, so ``r23`` is the correlation between the two prediction vectors.
    Uses Steiger's (1980) Z1* statistic, i.e. the Fisher-z difference scaled
    by the covariance term evaluated at the pooled correlation
    ``(r12 + r13) / 2``.
    """
    if n < 4:
        raise MetricError(f"n must be >= 4, got {n}")
    for name, r in (("r12", r12), ("r13", r13), ("r23", r23)):
        if not -1.0 < r < 1.0:
            raise MetricError(f"{name} must lie in (-1, 1), got {r}")
    det = 1.0 - r12**2 - r13**2 - r23**2 + 2.0 * r12 * r13 * r23
    if det < -1e-12:
        raise MetricError(
            f"correlation triple ({r12}, {r13}, {r23}) is not positive semi-definite"
        )

    rbar = 0.5 * (r12 + r13)
    rb2 = rbar * rbar
    psi = r23 * (1.0 - 2.0 * rb2) - 0.5 * rb2 * (1.0 - 2.0 * rb2 - r23**2)
    cov = psi / (1.0 - rb2) ** 2
    diff = fisher_z(r12) - fisher_z(r13)
    if diff == 0.0:
        z = 0.0
    else:
        denom = 2.0 - 2.0 * cov
        if denom <= 0.0:
            raise MetricError("degenerate covariance term (2 - 2c <= 0)")
        z = diff * math.sqrt(n - 3) / math.sqrt(denom)
    p = float(2.0 * stats.norm.sf(abs(z)))
    return SteigerResult(model_a, model_b, r12, r13, r23, int(n), z, min(1.0, p))


@dataclass
class ResidualHistogram:
    bin_edges: list[float]
    counts: list[int]
    mean: float
    sd: float


def residual_stats(y, yhat, bins: int = 20) -> ResidualHistogram:
    """Histogram of residuals ``yhat - y`` with uniform bins over [min, max]."""
    if bins < 1:
        raise MetricError("bins must be >= 1")
    y, yhat = _pair(y, yhat, min_len=1)
    e = yhat - y
    lo, hi = float(e.min()), float(e.max())
    counts, edges = np.histogram(e, bins=bins, range=(lo, hi) if hi > lo else None)
    sd = float(np.std(e, ddof=1)) if e.size > 1 else 0.0
    return ResidualHistogram(
        bin_edges=[float(x) for x in edges],
        counts=[int(c) for c in counts],
        mean=float(e.mean()),
        sd=sd,
    )


METRIC_NAMES = ("r2", "r", "mse")


def fold_metrics(y, yhat) -> dict[str, float]:
    return {"r2": r_squared(y, yhat), "r": pearson_r(y, yhat), "mse": mse(y, yhat)}


@dataclass
class MetricsReport:
    per_fold: list[dict[str, float]]
    mean: dict[str, float]
    sd: dict[str, float]
    single_fold: bool = False
    residual_hist: ResidualHistogram | None = None
    significance: list[SteigerResult] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def summary_line(self) -> str:
        """Text row in the ``R2 (sd) / r (sd) / MSE (sd)`` layout."""
        parts = [
            f"{self.mean[k]:.2f} ({self.sd[k]:.2f})" for k in METRIC_NAMES
        ]
        return " / ".join(parts)


def aggregate_folds(per_fold: list[dict[str, float]]) -> MetricsReport:
    """Unweighted mean and sample (n-1) sd of each metric across folds."""
    if not per_fold:
        raise MetricError("need at least one fold")
    keys = [k for k in METRIC_NAMES if all(k in f for f in per_fold)]
    mean, sd = {}, {}
    for k in keys:
        vals = np.array([f[k] for f in per_fold], dtype=np.float64)
        # sort first so the reduction order (and thus the bits) ignore fold order
        vals = np.sort(vals)
        mean[k] = float(math.fsum(vals) / vals.size)
        sd[k] = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
    return MetricsReport(
        per_fold=[dict(f) for f in per_fold],
        mean=mean,
        sd=sd,
        single_fold=len(per_fold) == 1,
    )


def significance_table_csv(tags: list[str], results: list[SteigerResult]) -> str:
    """Pairwise p-value grid with star annotations, one row per model."""
    lookup: dict[tuple[str, str], SteigerResult] = {}
    for res in results:
        lookup[(res.model_a, res.model_b)] = res
        lookup[(res.model_b, res.model_a)] = res
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model", *tags])
    for a in tags:
        row = [a]
        for b in tags:
            if a == b or (a, b) not in lookup:
                row.append("-")
            else:
                res = lookup[(a, b)]
                row.append(f"{res.p_two_tailed:.4g}{res.stars()}")
        writer.writerow(row)
    return buf.getvalue()
