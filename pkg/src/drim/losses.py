"""Shared contrastive, adversarial unique, survival and reconstruction losses."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .autograd import (
    ShapeError,
    Tensor,
    clip,
    concat,
    log,
    logsumexp,
    mean,
    permute_rows,
    sum_,
    sum_squared_error,
    take_rows,
)
from .encoders import Discriminator, discriminate
from .nn import frozen

HAZARD_CLAMP = 1e-7
DEFAULT_TAU = 0.1
DEFAULT_GAMMA = 0.8


class DegenerateBatchError(ValueError):
    pass


# -- shared loss ------------------------------------------------------------------


@dataclass
class SharedStack:
    """Shared representations of all modalities stacked row-wise.

    ``S[j]`` belongs to patient ``owner[j]``; rows with ``present[j]`` False
    take part in no term of the loss.
    """

    S: Tensor
    owner: np.ndarray
    present: np.ndarray
    tau: float = DEFAULT_TAU

    @classmethod
    def from_modalities(cls, shared: Sequence[Tensor], present, tau: float = DEFAULT_TAU) -> "SharedStack":
        present = np.asarray(present, dtype=bool)
        n = shared[0].shape[0]
        return cls(
            S=concat(list(shared), axis=0),
            owner=np.tile(np.arange(n), len(shared)),
            present=present.reshape(-1),
            tau=tau,
        )


def shared_logits(stack: SharedStack) -> tuple[Tensor, np.ndarray]:
    """Similarity logits ``s_j . s_k / tau`` among present rows, and their owners."""
    if stack.tau <= 0:
        raise ValueError(f"temperature must be positive, got {stack.tau}")
    idx = np.flatnonzero(np.asarray(stack.present, dtype=bool))
    S = take_rows(stack.S, idx)
    return (S @ S.T) / stack.tau, np.asarray(stack.owner)[idx]


def shared_loss(stack: SharedStack) -> Tensor:
    """Multi-positive contrastive loss over same-patient rows of other modalities.

    Each present row is an anchor; its positives are the other present rows of
    the same patient and the normaliser runs over every other present row.
    Anchor terms are averaged over their positives, then over anchors that
    have at least one positive.
    """
    logits, owner = shared_logits(stack)
    K = len(owner)
    same = owner[:, None] == owner[None, :]
    off_diag = ~np.eye(K, dtype=bool)
    positives = same & off_diag
    n_pos = positives.sum(axis=1)
    anchors = np.flatnonzero(n_pos > 0)
    if anchors.size == 0:
        raise DegenerateBatchError("degenerate batch: no anchor has a positive pair")

    log_norm = logsumexp(logits, axis=1, mask=off_diag)
    rows, cols = np.nonzero(positives)
    log_prob = logits[rows, cols] - log_norm[rows]
    weights = 1.0 / (n_pos[rows] * anchors.size)
    return -sum_(log_prob * weights)


# -- unique (adversarial) loss -------------------------------------------------------


class UniqueLoss(NamedTuple):
    disc: Tensor
    adv: Tensor
    skipped: bool


def _eligible(present, m) -> np.ndarray | None:
    idx = np.flatnonzero(present[m])
    return idx if idx.size >= 2 else None


def adversarial_loss(shared, unique, discriminators, present, adv_updates_shared: bool = False) -> Tensor | None:
    """``-sum_m mean log D^m(s, u)`` on joint pairs, with every discriminator frozen."""
    present = np.asarray(present, dtype=bool)
    terms = []
    for m, (s, u, D) in enumerate(zip(shared, unique, discriminators)):
        idx = _eligible(present, m)
        if idx is None:
            continue
        s_m, u_m = take_rows(s, idx), take_rows(u, idx)
        with frozen(D):
            joint = discriminate(D, s_m if adv_updates_shared else s_m.detach(), u_m)
        terms.append(-mean(log(clip(joint, HAZARD_CLAMP, 1.0))))
    return _total(terms) if terms else None


def discriminator_loss(shared, unique, discriminators, present, rng: np.random.Generator) -> Tensor | None:
    """Joint pairs should score low, shuffled (marginal) pairs high; inputs are detached."""
    present = np.asarray(present, dtype=bool)
    terms = []
    for m, (s, u, D) in enumerate(zip(shared, unique, discriminators)):
        idx = _eligible(present, m)
        if idx is None:
            continue
        perm = rng.permutation(idx.size)
        s_m, u_m = take_rows(s, idx).detach(), take_rows(u, idx).detach()
        joint = discriminate(D, s_m, u_m)
        marginal = discriminate(D, permute_rows(s_m, perm), u_m)
        terms.append(
            -(mean(log(clip(1.0 - joint, HAZARD_CLAMP, 1.0))) + mean(log(clip(marginal, HAZARD_CLAMP, 1.0))))
        )
    return _total(terms) if terms else None


def unique_loss(
    shared: Sequence[Tensor],
    unique: Sequence[Tensor],
    discriminators: Sequence[Discriminator],
    present,
    rng: np.random.Generator,
    adv_updates_shared: bool = False,
) -> UniqueLoss:
    """Adversarial estimate of the dependence between shared and unique parts.

    For each modality the discriminator sees joint pairs ``(s_i, u_i)`` and
    marginal pairs ``(s_pi(i), u_i)`` built with a uniform random permutation
    of present rows.  ``disc`` trains the discriminators only (inputs are
    detached); ``adv`` trains the unique encoders only (discriminator frozen,
    shared input detached unless ``adv_updates_shared``).  Modalities with
    fewer than two present rows are skipped.
    """
    disc = discriminator_loss(shared, unique, discriminators, present, rng)
    if disc is None:
        warnings.warn("unique_loss: every modality has fewer than two present rows; returning zeros")
        zero = Tensor(0.0)
        return UniqueLoss(zero, zero, True)
    adv = adversarial_loss(shared, unique, discriminators, present, adv_updates_shared)
    return UniqueLoss(disc, adv, False)


def _total(terms: Sequence[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


# -- survival loss -------------------------------------------------------------------


@dataclass(frozen=True)
class IntervalGrid:
    """``n_intervals`` equal-width intervals on ``[0, t_max]``; later times fall in the last one."""

    n_intervals: int
    t_max: float

    def __post_init__(self):
        if self.n_intervals < 1:
            raise ValueError("n_intervals must be >= 1")
        if not self.t_max > 0:
            raise ValueError("t_max must be positive")

    @property
    def cuts(self) -> np.ndarray:
        return np.linspace(0.0, self.t_max, self.n_intervals + 1)

    @property
    def midpoints(self) -> np.ndarray:
        c = self.cuts
        return 0.5 * (c[:-1] + c[1:])

    def interval(self, t) -> np.ndarray:
        """1-based index of the interval containing each time."""
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0) or not np.all(np.isfinite(t)):
            raise ValueError("interval: times must be finite and non-negative")
        width = self.t_max / self.n_intervals
        k = np.floor(t / width).astype(np.int64) + 1
        return np.minimum(k, self.n_intervals)

    @classmethod
    def from_times(cls, times, n_intervals: int = 20) -> "IntervalGrid":
        return cls(n_intervals, float(np.max(times)))


def survival_targets(times, events, grid: IntervalGrid) -> tuple[np.ndarray, np.ndarray]:
    """Indicator matrices (event-in-interval, survived-interval), each ``N x P``."""
    k = grid.interval(times)
    if np.any(k < 1) or np.any(k > grid.n_intervals):
        raise ValueError("interval index out of range")
    cols = np.arange(1, grid.n_intervals + 1)[None, :]
    events = np.asarray(events, dtype=bool)[:, None]
    at_k = cols == k[:, None]
    hit = at_k & events
    survived = (cols < k[:, None]) | (at_k & ~events)
    return hit, survived


def survival_loss(hazards: Tensor, times, events, grid: IntervalGrid) -> Tensor:
    """Negative log-likelihood of the discrete-time hazard model, averaged over patients."""
    times = np.asarray(times, dtype=np.float64)
    if hazards.ndim != 2 or hazards.shape != (len(times), grid.n_intervals):
        raise ShapeError("survival_loss", hazards.shape, (len(times), grid.n_intervals))
    hit, survived = survival_targets(times, events, grid)
    h = clip(hazards, HAZARD_CLAMP, 1.0 - HAZARD_CLAMP)
    ll = sum_(log(h) * hit.astype(h.dtype)) + sum_(log(1.0 - h) * survived.astype(h.dtype))
    return -ll / len(times)


# -- reconstruction and total ---------------------------------------------------------


def reconstruction_loss(recon: Sequence[Tensor], targets: Sequence, present) -> Tensor:
    """Sum over modalities of the squared error on present rows, per present row."""
    present = np.asarray(present, dtype=bool)
    terms = []
    for m, (xr, x) in enumerate(zip(recon, targets)):
        x = x.data if isinstance(x, Tensor) else np.asarray(x)
        if xr.shape != x.shape:
            raise ShapeError("reconstruction_loss", xr.shape, x.shape)
        idx = np.flatnonzero(present[m])
        if idx.size == 0:
            continue
        terms.append(sum_squared_error(take_rows(xr, idx), x[idx]) / idx.size)
    return _total(terms) if terms else Tensor(0.0)


def drim_total(task, shared, adv, gamma: float = DEFAULT_GAMMA):
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    return task + shared + gamma * adv
