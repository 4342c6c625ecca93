"""Confusion-count metrics, training-curve statistics and histogram Gaussian fits."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

FWHM_FACTOR = 2.0 * math.sqrt(2.0 * math.log(2.0))
CSV_FIELDS = ("model", "split", "fold", "iou", "accuracy", "precision", "recall", "f1", "tp", "fp", "fn", "tn")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ContractError("confusion counts must be nonnegative")

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def _binary(a, name):
    a = np.asarray(a)
    if a.dtype != bool and not np.all((a == 0) | (a == 1)):
        raise ContractError(f"{name} must be binary")
    return a.astype(bool)


def confusion_counts(pred_mask, true_mask):
    """Pixel counts with crack as the positive class."""
    pred, true = _binary(pred_mask, "prediction"), _binary(true_mask, "ground truth")
    if pred.shape != true.shape:
        raise ContractError(f"mask shapes differ: {pred.shape} vs {true.shape}")
    tp = int(np.count_nonzero(pred & true))
    fp = int(np.count_nonzero(pred & ~true))
    fn = int(np.count_nonzero(~pred & true))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


# Degenerate denominators: a prediction that is empty where the truth is
# empty counts as perfect, so an all-background image predicted as such
# scores 1 instead of being undefined.

def iou(c):
    denom = c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


def accuracy(c):
    return 1.0 if c.total == 0 else (c.tp + c.tn) / c.total


def precision(c):
    denom = c.tp + c.fp
    if denom == 0:
        return 1.0 if c.fn == 0 else 0.0
    return c.tp / denom


def recall(c):
    denom = c.tp + c.fn
    if denom == 0:
        return 1.0 if c.fp == 0 else 0.0
    return c.tp / denom


def f1(c):
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


@dataclass(frozen=True)
class MetricReport:
    iou: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    counts: ConfusionCounts

    @classmethod
    def from_counts(cls, c):
        return cls(iou(c), accuracy(c), precision(c), recall(c), f1(c), c)

    @classmethod
    def macro(cls, reports):
        """Mean of per-image metrics; counts are pooled."""
        if not reports:
            raise ContractError("macro average needs at least one report")
        counts = ConfusionCounts()
        for r in reports:
            counts = counts + r.counts
        mean = lambda attr: float(np.mean([getattr(r, attr) for r in reports]))
        return cls(mean("iou"), mean("accuracy"), mean("precision"), mean("recall"), mean("f1"), counts)

    def csv_row(self, model, split, fold):
        c = self.counts
        reals = [f"{v:.6f}" for v in (self.iou, self.accuracy, self.precision, self.recall, self.f1)]
        return [model, split, str(fold), *reals, str(c.tp), str(c.fp), str(c.fn), str(c.tn)]


# -- training-curve statistics -----------------------------------------

def rolling_stats(series, window=20):
    """``(mean, population std)`` of consecutive non-overlapping windows; a partial tail is dropped."""
    values = np.asarray(series, dtype=np.float64)
    if window < 1 or window > len(values):
        raise ContractError(f"window {window} does not fit a series of length {len(values)}")
    full = len(values) // window
    blocks = values[: full * window].reshape(full, window)
    return [(float(b.mean()), float(b.std())) for b in blocks]


def tail_average(series, n=100):
    values = np.asarray(series, dtype=np.float64)
    if n < 1 or n > len(values):
        raise ContractError(f"cannot average the last {n} of {len(values)} values")
    return float(values[-n:].mean())


# -- histogram and Gaussian fit ----------------------------------------

@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    @property
    def centers(self):
        return 0.5 * (self.edges[:-1] + self.edges[1:])


def histogram(values, bins=20, value_range=(0.0, 1.0)):
    """Equal-width histogram; values outside the range land in the boundary bins."""
    lo, hi = value_range
    if bins < 1 or not lo < hi:
        raise ContractError("histogram needs bins >= 1 and lo < hi")
    values = np.asarray(values, dtype=np.float64)
    edges = np.linspace(lo, hi, bins + 1)
    idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.int64)
    counts = np.bincount(np.clip(idx, 0, bins - 1), minlength=bins)
    return Histogram(edges, counts)


@dataclass(frozen=True)
class GaussFit:
    amplitude: float
    mu: float
    sigma: float
    residual_norm: float
    converged: bool
    iterations: int

    @property
    def fwhm(self):
        return FWHM_FACTOR * self.sigma


def _gauss(params, x):
    a, mu, sigma = params
    return a * np.exp(-((x - mu) ** 2) / (2.0 * sigma ** 2))


def gaussian_fit(centers, counts, max_iter=200, tol=1e-10):
    """Least-squares fit of ``a exp(-(x - mu)^2 / (2 sigma^2))`` by damped Gauss-Newton.

    Starts from the count-weighted moments. Each step halves until the
    residual does not grow. Non-convergence is reported through ``converged``.
    """
    x = np.asarray(centers, dtype=np.float64)
    y = np.asarray(counts, dtype=np.float64)
    if x.shape != y.shape:
        raise ContractError("centers and counts differ in length")
    if np.count_nonzero(y) < 4:
        raise ContractError("a Gaussian fit needs at least 4 nonzero bins")
    w = y / y.sum()
    mu = float(w @ x)
    sigma = float(np.sqrt(w @ (x - mu) ** 2))
    if sigma <= 0:
        sigma = float(np.ptp(x)) or 1.0
    params = np.array([y.max(), mu, sigma])
    resid = y - _gauss(params, x)
    cost = resid @ resid
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        a, mu, sigma = params
        g = np.exp(-((x - mu) ** 2) / (2.0 * sigma ** 2))
        jac = np.column_stack([g, a * g * (x - mu) / sigma ** 2, a * g * (x - mu) ** 2 / sigma ** 3])
        step = np.linalg.lstsq(jac, resid, rcond=None)[0]
        scale = 1.0
        while True:
            trial = params + scale * step
            trial[2] = abs(trial[2])
            trial_resid = y - _gauss(trial, x)
            trial_cost = trial_resid @ trial_resid
            if trial_cost <= cost or scale < 1e-12:
                break
            scale *= 0.5
        taken = scale * step
        if trial_cost <= cost:
            params, resid, cost = trial, trial_resid, trial_cost
        if np.linalg.norm(taken) < tol or trial_cost > cost:
            converged = trial_cost <= cost
            break
    a, mu, sigma = params
    return GaussFit(float(a), float(mu), float(abs(sigma)), float(np.sqrt(cost)), bool(converged), it)
