"""SROCC / PLCC / RMSE with four-parameter logistic alignment."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import least_squares
from scipy.special import expit
from scipy.stats import rankdata

MAX_FIT_ITERATIONS = 200


class UndefinedCorrelationError(ValueError):
    """Raised when one of the inputs has zero variance."""


@dataclass
class MetricReport:
    srocc: float
    plcc: float
    rmse: float
    logistic_params: list[float]
    n: int
    fit_ok: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["logistic_params"] = [None if np.isnan(p) else p for p in self.logistic_params]
        return d


def _check_pair(a, b, min_n: int = 3) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < min_n:
        raise ValueError(f"need at least {min_n} samples, got {a.size}")
    return a, b


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(da @ da), np.sqrt(db @ db)
    if sa == 0.0 or sb == 0.0:
        raise UndefinedCorrelationError("correlation is undefined for constant input")
    return float(np.clip((da @ db) / (sa * sb), -1.0, 1.0))


def srocc(pred, mos) -> float:
    pred, mos = _check_pair(pred, mos)
    return _pearson(rankdata(pred), rankdata(mos))


def plcc(aligned_pred, mos) -> float:
    aligned_pred, mos = _check_pair(aligned_pred, mos)
    return _pearson(aligned_pred, mos)


def rmse(aligned_pred, mos) -> float:
    aligned_pred, mos = _check_pair(aligned_pred, mos, min_n=1)
    return float(np.sqrt(np.mean((aligned_pred - mos) ** 2)))


def logistic4(x, params) -> np.ndarray:
    """(eta1 - eta2) / (1 + exp(-(x - eta3) / |eta4|)) + eta2"""
    e1, e2, e3, e4 = params
    return (e1 - e2) * expit((np.asarray(x, dtype=np.float64) - e3) / abs(e4)) + e2


def _logistic4_jac(params, x):
    e1, e2, e3, e4 = params
    a = abs(e4)
    z = (x - e3) / a
    s = expit(z)
    ds = (e1 - e2) * s * (1.0 - s)
    return np.stack([s, 1.0 - s, -ds / a, -ds * z / a * np.sign(e4)], axis=1)


def logistic4_fit(pred, mos) -> tuple[np.ndarray, np.ndarray, bool]:
    """Least-squares fit of the logistic curve mapping predictions onto MOS.

    Returns ``(params, aligned_pred, ok)``. When the fit diverges the alignment falls back
    to the identity and ``ok`` is False.
    """
    pred, mos = _check_pair(pred, mos, min_n=5)
    std = float(pred.std())
    if std == 0.0:
        raise UndefinedCorrelationError("cannot fit a logistic to constant predictions")
    p0 = np.array([mos.max(), mos.min(), float(np.median(pred)), std])

    res = least_squares(lambda p: logistic4(pred, p) - mos, p0, jac=lambda p: _logistic4_jac(p, pred),
                        method="lm", max_nfev=MAX_FIT_ITERATIONS, x_scale="jac")
    params = res.x
    aligned = logistic4(pred, params) if params[3] != 0 else np.full_like(pred, np.nan)
    if not (np.all(np.isfinite(params)) and np.all(np.isfinite(aligned))):
        warnings.warn("logistic fit diverged; using identity alignment", RuntimeWarning)
        return np.array([np.nan] * 4), pred.copy(), False
    return params, aligned, True


def evaluate(pred, mos) -> MetricReport:
    pred, mos = _check_pair(pred, mos)
    rho = srocc(pred, mos)
    if pred.size >= 5:
        params, aligned, ok = logistic4_fit(pred, mos)
    else:
        warnings.warn("fewer than 5 samples; skipping logistic alignment", RuntimeWarning)
        params, aligned, ok = np.array([np.nan] * 4), pred, False
    r = plcc(aligned, mos)
    return MetricReport(rho, r, rmse(aligned, mos), [float(p) for p in params], int(pred.size), ok)
