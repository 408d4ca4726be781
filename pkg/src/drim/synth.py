"""Synthetic multimodal survival cohorts with known shared and unique factors.

Every patient ``i`` has a shared factor ``z_i`` and, per modality ``m``, a
unique factor ``w_i^m``.  Modality features are linear mixtures of both plus
Gaussian noise; the log-hazard is a linear function of the same factors, so
the ground truth for every downstream check is known.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class CohortFormatError(ValueError):
    """A cohort file is missing or cannot be parsed."""

    def __init__(self, path, row: int | None, message: str):
        self.path = str(path)
        self.row = row
        where = f"{self.path}" + (f", row {row}" if row is not None else "")
        super().__init__(f"{where}: {message}")


@dataclass
class GeneratorConfig:
    n_patients: int = 600
    n_modalities: int = 3
    shared_dim: int = 4
    unique_dim: int = 4
    feature_dims: list[int] = field(default_factory=lambda: [32, 32, 32])
    noise_std: float = 1.0
    missing_rates: list[float] = field(default_factory=lambda: [0.1, 0.2, 0.4])
    censor_rate_target: float = 0.3
    horizon: float = 10.0
    seed: int = 0
    # log-hazard = shared_effect * g(z) + sum_m unique_effect[m] * g_m(w^m), g unit-norm linear
    shared_effect: float = 4.5
    unique_effect: list[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])

    def validate(self) -> None:
        M = self.n_modalities
        if self.n_patients < 1:
            raise ValueError("n_patients must be positive")
        if M < 2:
            raise ValueError(
                f"infeasible config: every patient needs at least two modalities, got n_modalities={M}"
            )
        for name in ("feature_dims", "missing_rates", "unique_effect"):
            if len(getattr(self, name)) != M:
                raise ValueError(f"{name} has {len(getattr(self, name))} entries, expected {M}")
        if any(r < 0 or r >= 1 for r in self.missing_rates):
            raise ValueError(f"missing_rates must lie in [0, 1): {self.missing_rates}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if not 0 < self.censor_rate_target < 1:
            raise ValueError("censor_rate_target must lie in (0, 1)")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if min(self.feature_dims) < 1 or self.shared_dim < 1 or self.unique_dim < 1:
            raise ValueError("dimensions must be positive")


@dataclass
class PatientBatch:
    features: list[np.ndarray]
    present: np.ndarray  # (M, N) bool
    time: np.ndarray
    event: np.ndarray  # bool
    true_shared: np.ndarray | None = None
    true_unique: list[np.ndarray] | None = None
    true_risk: np.ndarray | None = None
    patient_ids: np.ndarray | None = None

    def __post_init__(self):
        self.present = np.asarray(self.present, dtype=bool)
        self.time = np.asarray(self.time, dtype=np.float64)
        self.event = np.asarray(self.event, dtype=bool)
        if self.patient_ids is None:
            self.patient_ids = np.arange(len(self.time))

    @property
    def n_patients(self) -> int:
        return len(self.time)

    @property
    def n_modalities(self) -> int:
        return len(self.features)

    @property
    def feature_dims(self) -> list[int]:
        return [x.shape[1] for x in self.features]

    def subset(self, idx) -> "PatientBatch":
        idx = np.asarray(idx, dtype=np.intp)
        return PatientBatch(
            features=[x[idx] for x in self.features],
            present=self.present[:, idx],
            time=self.time[idx],
            event=self.event[idx],
            true_shared=None if self.true_shared is None else self.true_shared[idx],
            true_unique=None if self.true_unique is None else [w[idx] for w in self.true_unique],
            true_risk=None if self.true_risk is None else self.true_risk[idx],
            patient_ids=self.patient_ids[idx],
        )

    def select_modalities(self, mods: Sequence[int]) -> "PatientBatch":
        """Keep only modalities ``mods`` (in that order) for every patient."""
        mods = list(mods)
        out = self.subset(np.arange(self.n_patients))
        out.features = [self.features[m] for m in mods]
        out.present = self.present[mods]
        if self.true_unique is not None:
            out.true_unique = [self.true_unique[m] for m in mods]
        return out

    def with_presence(self, present) -> "PatientBatch":
        """Copy with a new presence mask; newly absent rows are zeroed."""
        present = np.asarray(present, dtype=bool)
        feats = [np.where(present[m][:, None], x, 0.0) for m, x in enumerate(self.features)]
        out = self.subset(np.arange(self.n_patients))
        out.features, out.present = feats, present
        return out


def _unit_vector(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def calibrate_censoring(event_time: np.ndarray, u: np.ndarray, horizon: float, target: float) -> float:
    """Scale ``c`` so that censoring times ``u * horizon * c`` censor ~``target`` of patients."""

    def frac(log_c):
        return np.mean(u * horizon * np.exp(log_c) < event_time)

    lo, hi = np.log(1e-6), np.log(1e6)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if frac(mid) > target:
            lo = mid
        else:
            hi = mid
    # frac is a decreasing step function; pick whichever side of the step is closer
    return float(np.exp(lo if abs(frac(lo) - target) < abs(frac(hi) - target) else hi))


def _apply_missingness(rng, n: int, rates: Sequence[float]) -> np.ndarray:
    M = len(rates)
    present = rng.random((M, n)) >= np.asarray(rates)[:, None]
    for i in np.flatnonzero(present.sum(axis=0) < 2):
        while present[:, i].sum() < 2:
            dropped = np.flatnonzero(~present[:, i])
            present[rng.choice(dropped), i] = True
    return present


def generate(config: GeneratorConfig) -> PatientBatch:
    config.validate()
    rng = np.random.default_rng(config.seed)
    N, M = config.n_patients, config.n_modalities
    k_s, k_u = config.shared_dim, config.unique_dim

    mix_shared = [rng.standard_normal((d, k_s)) / np.sqrt(k_s) for d in config.feature_dims]
    mix_unique = [rng.standard_normal((d, k_u)) / np.sqrt(k_u) for d in config.feature_dims]
    risk_shared = _unit_vector(rng, k_s)
    risk_unique = [_unit_vector(rng, k_u) for _ in range(M)]

    z = rng.standard_normal((N, k_s))
    w = [rng.standard_normal((N, k_u)) for _ in range(M)]
    features = [
        z @ A.T + w_m @ B.T + config.noise_std * rng.standard_normal((N, A.shape[0]))
        for A, B, w_m in zip(mix_shared, mix_unique, w)
    ]

    risk = config.shared_effect * (z @ risk_shared)
    for beta, g, w_m in zip(config.unique_effect, risk_unique, w):
        risk = risk + beta * (w_m @ g)

    base_rate = np.log(2.0) / (0.5 * config.horizon)
    event_time = rng.exponential(size=N) / (base_rate * np.exp(risk))
    u = rng.random(N)
    c = calibrate_censoring(event_time, u, config.horizon, config.censor_rate_target)
    censor_time = u * config.horizon * c
    event = event_time <= censor_time
    time = np.minimum(event_time, censor_time)

    present = _apply_missingness(rng, N, config.missing_rates)
    features = [np.where(present[m][:, None], x, 0.0) for m, x in enumerate(features)]

    return PatientBatch(
        features=features,
        present=present,
        time=time,
        event=event,
        true_shared=z,
        true_unique=w,
        true_risk=risk,
    )


def _allocate(total: int, weights: Sequence[float]) -> np.ndarray:
    """Integer counts summing to ``total`` in proportion to ``weights`` (largest remainder)."""
    weights = np.asarray(weights, dtype=np.float64)
    raw = total * weights / weights.sum()
    counts = np.floor(raw).astype(int)
    for k in np.argsort(-(raw - counts), kind="stable")[: total - counts.sum()]:
        counts[k] += 1
    return counts


def split(batch: PatientBatch, fractions: Sequence[float], seed: int) -> list[PatientBatch]:
    """Patient-level partition stratified on the event indicator."""
    return [batch.subset(idx) for idx in split_indices(batch.event, fractions, seed)]


def split_indices(event: np.ndarray, fractions: Sequence[float], seed: int) -> list[np.ndarray]:
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.ndim != 1 or len(fractions) == 0 or np.any(fractions <= 0):
        raise ValueError(f"fractions must be positive: {fractions.tolist()}")
    if not np.isclose(fractions.sum(), 1.0):
        raise ValueError(f"fractions must sum to 1, got {fractions.sum()}")
    event = np.asarray(event, dtype=bool)
    N = len(event)
    sizes = _allocate(N, fractions)
    if np.any(sizes == 0):
        raise ValueError(f"fractions {fractions.tolist()} leave an empty split for N={N}")

    n_ev = int(event.sum())
    ev_counts = np.minimum(_allocate(n_ev, sizes), sizes)
    # clamping can only drop events; hand leftovers to splits with room
    while ev_counts.sum() < n_ev:
        k = int(np.argmax(sizes - ev_counts))
        ev_counts[k] += 1
    cens_counts = sizes - ev_counts

    rng = np.random.default_rng(seed)
    ev_idx = rng.permutation(np.flatnonzero(event))
    ce_idx = rng.permutation(np.flatnonzero(~event))
    out, e0, c0 = [], 0, 0
    for ne, nc in zip(ev_counts, cens_counts):
        idx = np.concatenate([ev_idx[e0:e0 + ne], ce_idx[c0:c0 + nc]])
        out.append(np.sort(idx))
        e0, c0 = e0 + ne, c0 + nc
    return out


# -- directory import / export ----------------------------------------------------------


def _write_matrix(path: Path, header: Sequence[str], rows) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    os.replace(tmp, path)


def _read_matrix(path: Path, expect_header=None) -> tuple[list[str], np.ndarray]:
    if not path.exists():
        raise CohortFormatError(path, None, "file not found")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CohortFormatError(path, 1, "empty file, expected a header row") from None
        if expect_header is not None and header != list(expect_header):
            raise CohortFormatError(path, 1, f"header {header} != expected {list(expect_header)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise CohortFormatError(path, lineno, f"expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise CohortFormatError(path, lineno, str(exc)) from None
    return header, np.array(rows, dtype=np.float64).reshape(len(rows), len(header))


def export_cohort(batch: PatientBatch, directory, with_truth: bool = False) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for m, x in enumerate(batch.features):
        _write_matrix(directory / f"modality_{m}.csv", [f"f{j}" for j in range(x.shape[1])], x)
    M = batch.n_modalities
    _write_matrix(directory / "presence.csv", [f"m{m}" for m in range(M)], batch.present.T.astype(int))
    _write_matrix(
        directory / "outcomes.csv",
        ["patient_id", "time", "event"],
        ([int(pid), float(t), int(e)] for pid, t, e in zip(batch.patient_ids, batch.time, batch.event)),
    )
    if with_truth:
        if batch.true_shared is None:
            raise ValueError("batch carries no ground-truth factors")
        _write_matrix(
            directory / "truth_shared.csv", [f"z{j}" for j in range(batch.true_shared.shape[1])], batch.true_shared
        )
        for m, w in enumerate(batch.true_unique):
            _write_matrix(directory / f"truth_unique_{m}.csv", [f"w{j}" for j in range(w.shape[1])], w)
        _write_matrix(directory / "truth_risk.csv", ["risk"], batch.true_risk[:, None])
    return directory


def load_cohort(directory) -> PatientBatch:
    directory = Path(directory)
    if not directory.is_dir():
        raise CohortFormatError(directory, None, "cohort directory not found")
    _, outcomes = _read_matrix(directory / "outcomes.csv", ["patient_id", "time", "event"])
    N = len(outcomes)
    pres_header, presence = _read_matrix(directory / "presence.csv")
    M = len(pres_header)
    if presence.shape[0] != N:
        raise CohortFormatError(directory / "presence.csv", None, f"{presence.shape[0]} rows, expected {N}")
    bad = np.flatnonzero(~np.isin(presence, (0.0, 1.0)).all(axis=1))
    if bad.size:
        raise CohortFormatError(directory / "presence.csv", int(bad[0]) + 2, "presence flags must be 0 or 1")
    features = []
    for m in range(M):
        path = directory / f"modality_{m}.csv"
        _, x = _read_matrix(path)
        if x.shape[0] != N:
            raise CohortFormatError(path, None, f"{x.shape[0]} rows, expected {N}")
        features.append(x)
    events = outcomes[:, 2]
    bad = np.flatnonzero(~np.isin(events, (0.0, 1.0)) | (outcomes[:, 1] < 0) | ~np.isfinite(outcomes[:, 1]))
    if bad.size:
        raise CohortFormatError(directory / "outcomes.csv", int(bad[0]) + 2, "invalid time or event value")

    truth_path = directory / "truth_shared.csv"
    true_shared = true_unique = true_risk = None
    if truth_path.exists():
        true_shared = _read_matrix(truth_path)[1]
        true_unique = [_read_matrix(directory / f"truth_unique_{m}.csv")[1] for m in range(M)]
        true_risk = _read_matrix(directory / "truth_risk.csv")[1][:, 0]
    return PatientBatch(
        features=features,
        present=presence.T.astype(bool),
        time=outcomes[:, 1],
        event=outcomes[:, 2].astype(bool),
        true_shared=true_shared,
        true_unique=true_unique,
        true_risk=true_risk,
        patient_ids=outcomes[:, 0].astype(np.int64),
    )
