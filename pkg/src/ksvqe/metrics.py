"""Correlation metrics, the correlation training loss, and ranked-pair accuracy."""

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import curve_fit
from scipy.stats import rankdata

PLCC_LOSS_EPS = 1e-8


class UndefinedCorrelationError(ValueError):
    """Raised when a correlation is requested for a constant vector."""


class LogisticFitWarning(UserWarning):
    pass


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("correlation needs at least two samples")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("non-finite values in correlation input")
    return x, y


def _pearson(x, y):
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = (xc * xc).sum()
    syy = (yc * yc).sum()
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("correlation is undefined for a constant vector")
    # one square root over the product keeps rank correlations of small integers exact
    return float(np.clip((xc * yc).sum() / np.sqrt(sxx * syy), -1.0, 1.0))


def srocc(x, y) -> float:
    """Spearman rank correlation; ties share their average rank."""
    x, y = _check_pair(x, y)
    return _pearson(rankdata(x), rankdata(y))


def logistic4(x, b1, b2, b3, b4):
    return (b1 - b2) / (1.0 + np.exp(-(x - b3) / np.abs(b4))) + b2


def fit_logistic(pred, target):
    """Fit a 4-parameter logistic from predictions to targets and return the mapped predictions.

    Returns None when the fit fails to converge.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    p0 = [target.max(), target.min(), float(np.mean(pred)), float(np.std(pred)) or 1.0]
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            params, _ = curve_fit(logistic4, pred, target, p0=p0, maxfev=10000)
    except (RuntimeError, ValueError):
        return None
    mapped = logistic4(pred, *params)
    if not np.isfinite(mapped).all():
        return None
    return mapped


def plcc(x, y, logistic_map: bool = False) -> float:
    """Pearson correlation of predictions ``x`` with targets ``y``.

    With ``logistic_map`` the predictions first go through a fitted 4-parameter logistic;
    a failed fit falls back to the raw correlation with a warning.
    """
    x, y = _check_pair(x, y)
    _pearson(x, y)  # constant inputs fail before any fitting
    if logistic_map:
        mapped = fit_logistic(x, y)
        if mapped is None or np.ptp(mapped) == 0:
            warnings.warn("logistic fit did not converge; using raw PLCC", LogisticFitWarning, stacklevel=2)
        else:
            x = mapped
    return _pearson(x, y)


def plcc_loss(pred, mos):
    """(1 - r) / 2 with r the Pearson correlation over the batch; differentiable in ``pred``."""
    pred = torch.as_tensor(pred)
    mos = torch.as_tensor(mos, dtype=pred.dtype)
    if pred.ndim != 1 or pred.shape != mos.shape:
        raise ValueError(f"expected matching 1-D batches, got {tuple(pred.shape)} and {tuple(mos.shape)}")
    if pred.shape[0] < 2:
        raise ValueError("plcc_loss needs a batch of at least 2")
    pc = pred - pred.mean()
    mc = mos - mos.mean()
    # the floor only bites for (near-)constant batches, where r falls to 0
    denom = torch.sqrt(torch.clamp((pc * pc).sum() * (mc * mc).sum(), min=PLCC_LOSS_EPS**2))
    r = (pc * mc).sum() / denom
    return (1.0 - r) / 2.0


@dataclass(frozen=True)
class RankPair:
    clip_a: str
    clip_b: str
    preferred: str  # "a" or "b"
    homogeneous: bool

    def __post_init__(self):
        if self.preferred not in ("a", "b"):
            raise ValueError(f"preferred must be 'a' or 'b', got {self.preferred!r}")


def rank_accuracy(pairs, predictions) -> dict:
    """Fraction of pairs whose predicted order agrees with the annotation.

    ``predictions`` maps clip id to score. Exact ties count as wrong. Returns the overall
    accuracy plus one entry per homogeneity class (None for an empty class) and the counts.
    """
    hits = {True: 0, False: 0}
    counts = {True: 0, False: 0}
    for p in pairs:
        for clip in (p.clip_a, p.clip_b):
            if clip not in predictions:
                raise ValueError(f"no prediction for clip {clip!r}")
        diff = float(predictions[p.clip_a]) - float(predictions[p.clip_b])
        want = 1.0 if p.preferred == "a" else -1.0
        counts[p.homogeneous] += 1
        hits[p.homogeneous] += int(np.sign(diff) == want)

    def frac(h, n):
        return h / n if n else None

    total = counts[True] + counts[False]
    return {
        "all": frac(hits[True] + hits[False], total),
        "homogeneous": frac(hits[True], counts[True]),
        "non_homogeneous": frac(hits[False], counts[False]),
        "n_pairs": total,
        "n_homogeneous": counts[True],
        "n_non_homogeneous": counts[False],
    }


def evaluate_scores(pred, mos, pairs=None, predictions=None, logistic: bool = False) -> dict:
    """SROCC, PLCC and (when pairs are given) rank accuracy in one report dict."""
    out = {"srocc": srocc(pred, mos), "plcc": plcc(pred, mos, logistic_map=logistic), "n": int(np.size(pred))}
    if pairs is not None:
        out["rank_accuracy"] = rank_accuracy(pairs, predictions)
    return out
