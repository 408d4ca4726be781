"""Survival evaluation: discrete hazards to survival, C-index, IPCW Brier/INBLL, KM, log-rank."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.stats import chi2 as chi2_dist

from .losses import IntervalGrid

LOG_CLAMP = 1e-7

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass
class SurvivalCurve:
    grid: IntervalGrid
    S: np.ndarray  # (N, P): survival through the end of each interval

    def at(self, t) -> np.ndarray:
        """Predicted survival at times ``t``, read off the interval containing each time."""
        k = self.grid.interval(np.atleast_1d(t)) - 1
        return self.S[:, k]


def hazards_to_survival(hazards, grid: IntervalGrid) -> SurvivalCurve:
    h = np.asarray(hazards, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != grid.n_intervals:
        raise ValueError(f"hazards shape {h.shape} does not match {grid.n_intervals} intervals")
    return SurvivalCurve(grid, np.cumprod(1.0 - h, axis=1))


def c_index_antolini(curve: SurvivalCurve, times, events) -> float:
    """Time-dependent concordance of Antolini et al.

    A pair (i, j) is comparable when ``t_i < t_j`` and i had the event, or
    ``t_i == t_j`` with i an event and j censored.  It is concordant when
    i's predicted survival at its own event interval is lower than j's at the
    same interval; equal predictions count one half.
    """
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events, dtype=bool)
    k = curve.grid.interval(t) - 1
    own = curve.S[np.arange(len(t)), k]  # S_i(k_i)
    other = curve.S[:, k].T  # [i, j] = S_j(k_i)
    comparable = e[:, None] & ((t[:, None] < t[None, :]) | ((t[:, None] == t[None, :]) & ~e[None, :]))
    n = comparable.sum()
    if n == 0:
        raise ValueError("c_index_antolini: no comparable pairs")
    conc = (own[:, None] < other) & comparable
    ties = (own[:, None] == other) & comparable
    return float((conc.sum() + 0.5 * ties.sum()) / n)


# -- Kaplan-Meier and log-rank ---------------------------------------------------------


@dataclass
class KMEstimate:
    times: np.ndarray  # distinct event times, ascending
    at_risk: np.ndarray
    events: np.ndarray
    survival: np.ndarray  # value right after each event time

    def __call__(self, t) -> np.ndarray:
        """Right-continuous survival at ``t``."""
        idx = np.searchsorted(self.times, np.asarray(t, dtype=np.float64), side="right")
        return np.concatenate([[1.0], self.survival])[idx]

    def left(self, t) -> np.ndarray:
        """Left limit ``S(t-)``."""
        idx = np.searchsorted(self.times, np.asarray(t, dtype=np.float64), side="left")
        return np.concatenate([[1.0], self.survival])[idx]


def km_estimate(times, events) -> KMEstimate:
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events, dtype=bool)
    if t.size == 0:
        raise ValueError("km_estimate needs at least one observation")
    uniq = np.unique(t[e])
    at_risk = np.array([(t >= u).sum() for u in uniq], dtype=np.int64)
    n_ev = np.array([(e & (t == u)).sum() for u in uniq], dtype=np.int64)
    survival = np.cumprod(1.0 - n_ev / at_risk) if uniq.size else np.empty(0)
    return KMEstimate(uniq, at_risk, n_ev, survival)


class LogRankResult(NamedTuple):
    chi2: float
    p: float


def logrank_test(time_a, event_a, time_b, event_b) -> LogRankResult:
    ta, tb = np.asarray(time_a, float), np.asarray(time_b, float)
    ea, eb = np.asarray(event_a, bool), np.asarray(event_b, bool)
    if ta.size == 0 or tb.size == 0:
        raise ValueError("logrank_test: both groups must be non-empty")
    t = np.concatenate([ta, tb])
    e = np.concatenate([ea, eb])
    if not e.any():
        raise ValueError("logrank_test: no events in either group")
    observed = expected = variance = 0.0
    for u in np.unique(t[e]):
        n_a, n = (ta >= u).sum(), (t >= u).sum()
        d_a, d = (ea & (ta == u)).sum(), (e & (t == u)).sum()
        observed += d_a
        expected += d * n_a / n
        if n > 1:
            variance += d * (n_a / n) * (1 - n_a / n) * (n - d) / (n - 1)
    if variance == 0.0:
        return LogRankResult(0.0, 1.0)
    stat = (observed - expected) ** 2 / variance
    return LogRankResult(float(stat), float(chi2_dist.sf(stat, 1)))


# -- IPCW scores -------------------------------------------------------------------------


@dataclass
class IPCWScore:
    eval_times: np.ndarray
    scores: np.ndarray  # per eval time
    integrated: float
    dropped: int  # terms skipped because the censoring survival was zero


def default_eval_times(grid: IntervalGrid, times) -> np.ndarray:
    mids = grid.midpoints
    return mids[mids <= np.max(times)]


def _ipcw(curve: SurvivalCurve, times, events, eval_times, kind: str) -> IPCWScore:
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events, dtype=bool)
    eval_times = default_eval_times(curve.grid, t) if eval_times is None else np.asarray(eval_times, float)
    if eval_times.size == 0:
        raise ValueError("no evaluation times inside the follow-up range")
    if np.any(eval_times < 0) or np.any(eval_times > curve.grid.t_max):
        raise ValueError("evaluation times must lie within the interval grid")
    pred = curve.at(eval_times)  # N x E
    cens = km_estimate(t, ~e)
    g_own = cens.left(t)  # G(t_i-)
    g_eval = cens(eval_times)  # G(t)

    died = (t[:, None] <= eval_times[None, :]) & e[:, None]
    alive = t[:, None] > eval_times[None, :]
    if kind == "brier":
        loss_died, loss_alive = pred**2, (1.0 - pred) ** 2
    else:
        p = np.clip(pred, LOG_CLAMP, 1.0 - LOG_CLAMP)
        loss_died, loss_alive = -np.log(1.0 - p), -np.log(p)

    w_died = np.divide(1.0, g_own, out=np.zeros_like(g_own), where=g_own > 0)[:, None]
    w_alive = np.divide(1.0, g_eval, out=np.zeros_like(g_eval), where=g_eval > 0)[None, :]
    dropped = int((died & (g_own[:, None] == 0)).sum() + (alive & (g_eval[None, :] == 0)).sum())
    terms = np.where(died, loss_died * w_died, 0.0) + np.where(alive, loss_alive * w_alive, 0.0)
    scores = terms.mean(axis=0)
    if eval_times.size == 1:
        integrated = float(scores[0])
    else:
        integrated = float(_trapezoid(scores, eval_times) / (eval_times[-1] - eval_times[0]))
    return IPCWScore(eval_times, scores, integrated, dropped)


def brier_and_ibs(curve: SurvivalCurve, times, events, eval_times=None) -> IPCWScore:
    """Graf's inverse-probability-of-censoring weighted Brier score and its integral."""
    return _ipcw(curve, times, events, eval_times, "brier")


def inbll(curve: SurvivalCurve, times, events, eval_times=None) -> IPCWScore:
    """IPCW negative binomial log-likelihood, integrated like the Brier score."""
    return _ipcw(curve, times, events, eval_times, "nbll")


def cs_score(cindex: float, ibs: float) -> float:
    return (cindex + (1.0 - ibs)) / 2.0


def risk_scores(hazards, method: str = "sum") -> np.ndarray:
    h = np.asarray(hazards, dtype=np.float64)
    if method == "sum":
        return h.sum(axis=1)
    if method == "one_minus_survival":
        return 1.0 - np.prod(1.0 - h, axis=1)
    raise ValueError(f"unknown risk method {method!r}")


def risk_stratify(hazards, method: str = "sum") -> np.ndarray:
    """True for high-risk patients: score strictly above the median (ties go low)."""
    scores = risk_scores(hazards, method)
    if scores.size < 2:
        raise ValueError("risk_stratify needs at least two patients")
    return scores > np.median(scores)


def evaluate(hazards, times, events, grid: IntervalGrid, risk_method: str = "sum") -> dict:
    """All test metrics for one set of predictions; log-rank fields are NaN when undefined."""
    curve = hazards_to_survival(hazards, grid)
    cidx = c_index_antolini(curve, times, events)
    ibs = brier_and_ibs(curve, times, events).integrated
    nbll = inbll(curve, times, events).integrated
    out = {"cindex": cidx, "ibs": ibs, "inbll": nbll, "cs": cs_score(cidx, ibs),
           "logrank_chi2": float("nan"), "logrank_p": float("nan")}
    high = risk_stratify(hazards, risk_method)
    t, e = np.asarray(times), np.asarray(events, bool)
    if high.any() and (~high).any() and e.any():
        res = logrank_test(t[high], e[high], t[~high], e[~high])
        out["logrank_chi2"], out["logrank_p"] = res.chi2, res.p
    return out
