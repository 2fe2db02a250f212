"""Evaluation statistics: accuracy, macro-F1, 95% CIs, paired t-tests.

The Student-t quantile and CDF are computed here via the regularized
incomplete beta function (continued-fraction evaluation), so the module has
no statistics dependencies and the test suite can check it against direct
numerical integration of the t density.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, columns = predicted class

    @classmethod
    def from_predictions(cls, true, pred, n_classes: int) -> "ConfusionMatrix":
        true = np.asarray(true, dtype=np.int64)
        pred = np.asarray(pred, dtype=np.int64)
        if true.shape != pred.shape:
            raise ValueError(f"length mismatch: {true.shape} vs {pred.shape}")
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (true, pred), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accuracy(cm: ConfusionMatrix) -> float:
    """Fraction of correct predictions: trace over total."""
    total = cm.total
    if total == 0:
        raise ValueError("accuracy of an empty confusion matrix")
    return float(np.trace(cm.counts)) / total


def macro_f1(cm: ConfusionMatrix) -> float:
    """Unweighted mean of per-class one-vs-rest F1 = 2TP/(2TP+FP+FN).

    A class with no true and no predicted items contributes 0, which keeps
    the score monotone in errors.
    """
    if cm.total == 0:
        raise ValueError("macro_f1 of an empty confusion matrix")
    counts = cm.counts
    tp = np.diag(counts).astype(np.float64)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1.0), 0.0)
    return float(f1.mean())


@dataclass
class StatSummary:
    mean: float
    std: float  # sample standard deviation (ddof=1)
    half95: float  # half-width of the 95% confidence interval
    n: int
    defined: bool = True  # False when n < 2 makes the CI meaningless


def ci95(samples) -> StatSummary:
    """Student-t 95% confidence interval: half-width t(0.975, n−1)·s/√n."""
    x = np.asarray(samples, dtype=np.float64)
    n = x.size
    if n < 2:
        mean = float(x.mean()) if n else float("nan")
        return StatSummary(mean, float("nan"), float("nan"), n, defined=False)
    mean = float(x.mean())
    s = float(x.std(ddof=1))
    half = t_quantile(0.975, n - 1) * s / math.sqrt(n)
    return StatSummary(mean, s, half, n)


@dataclass
class TTestResult:
    t: float
    p: float
    n: int
    degenerate: bool = False  # zero-variance differences


def paired_t_test(a, b) -> TTestResult:
    """Two-sided paired t-test on equal-length samples.

    Zero-variance differences use the convention t = sign(mean)·inf with
    p = 0 (or t = 0, p = 1 when the samples are identical) and set the
    degenerate flag.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be equal-length vectors: {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError(f"paired_t_test needs >= 2 pairs, got {n}")
    d = a - b
    dbar = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if dbar == 0.0:
            return TTestResult(0.0, 1.0, n, degenerate=True)
        return TTestResult(math.copysign(math.inf, dbar), 0.0, n, degenerate=True)
    t = dbar / (sd / math.sqrt(n))
    p = 2.0 * (1.0 - t_cdf(abs(t), n - 1))
    return TTestResult(t, min(max(p, 0.0), 1.0), n)


# -- Student-t internals -------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    MAXIT, EPS, FPMIN = 300, 3e-14, 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < FPMIN:
        d = FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, MAXIT + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < FPMIN:
            d = FPMIN
        c = 1.0 + aa / c
        if abs(c) < FPMIN:
            c = FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < FPMIN:
            d = FPMIN
        c = 1.0 + aa / c
        if abs(c) < FPMIN:
            c = FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < EPS:
            return h
    raise RuntimeError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if x < 0.0 or x > 1.0:
        raise ValueError(f"x must be in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_cdf(t: float, df: int) -> float:
    """CDF of Student's t with ``df`` degrees of freedom."""
    if df < 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {df}")
    if t == 0.0:
        return 0.5
    x = df / (df + t * t)
    tail = 0.5 * betainc(df / 2.0, 0.5, x)
    return 1.0 - tail if t > 0 else tail


def t_quantile(q: float, df: int) -> float:
    """Inverse CDF of Student's t via bisection + Newton polish."""
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile must be in (0, 1), got {q}")
    if q == 0.5:
        return 0.0
    # bracket, expanding geometrically
    lo, hi = -1.0, 1.0
    while t_cdf(lo, df) > q:
        lo *= 2.0
    while t_cdf(hi, df) < q:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if t_cdf(mid, df) < q:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-13 * max(1.0, abs(hi)):
            break
    t = 0.5 * (lo + hi)
    # Newton refinement using the t density
    for _ in range(5):
        pdf = _t_pdf(t, df)
        if pdf <= 0:
            break
        t -= (t_cdf(t, df) - q) / pdf
    return t


def _t_pdf(t: float, df: int) -> float:
    ln = (
        math.lgamma((df + 1) / 2.0)
        - math.lgamma(df / 2.0)
        - 0.5 * math.log(df * math.pi)
        - (df + 1) / 2.0 * math.log1p(t * t / df)
    )
    return math.exp(ln)
