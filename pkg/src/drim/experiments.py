"""Experiment orchestration shared by the CLI and the acceptance suite."""
from __future__ import annotations

import copy
import itertools
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .metrics import evaluate

METRIC_COLUMNS = ("cindex", "ibs", "inbll", "cs", "logrank_chi2", "logrank_p")
REPORT_COLUMNS = ("run_id", "seed", "subset") + METRIC_COLUMNS
GRID_COLUMNS = ("subset", "n", "train_pct") + METRIC_COLUMNS


def all_subsets(M: int) -> list[tuple[int, ...]]:
    """Every nonempty subset of ``range(M)``, smallest first."""
    return [c for k in range(1, M + 1) for c in itertools.combinations(range(M), k)]


def subset_label(subset) -> str:
    return "+".join(str(m) for m in subset)


def parse_subset(text: str, M: int) -> tuple[int, ...]:
    try:
        mods = tuple(sorted({int(p) for p in str(text).replace(",", "+").split("+") if p.strip()}))
    except ValueError:
        raise ValueError(f"bad subset {text!r}; expected e.g. 0+2") from None
    if not mods or mods[0] < 0 or mods[-1] >= M:
        raise ValueError(f"subset {text!r} must be a nonempty subset of 0..{M - 1}")
    return mods


def pattern_share(present: np.ndarray, subset) -> float:
    """Percentage of patients whose presence pattern is exactly ``subset``."""
    want = np.zeros(present.shape[0], dtype=bool)
    want[list(subset)] = True
    return float(100.0 * np.all(present == want[:, None], axis=0).mean())


def evaluate_subset(model, grid, test, subset) -> dict:
    """Metrics on test patients having at least ``subset``, with every other modality masked."""
    subset = list(subset)
    keep = np.flatnonzero(test.present[subset].all(axis=0))
    row = {"subset": subset_label(subset), "n": int(keep.size)}
    if keep.size == 0:
        return {**row, **{k: None for k in METRIC_COLUMNS}}
    data = test.subset(keep)
    mask = np.zeros_like(data.present)
    mask[subset] = True
    data = data.with_presence(mask)
    hazards = model.predict(data.features, data.present)
    try:
        metrics = evaluate(hazards, data.time, data.event, grid)
    except ValueError:
        # too few patients or events for the metrics to be defined
        metrics = {k: None for k in METRIC_COLUMNS}
    return {**row, **metrics}


def robustness_grid(model, grid, train, test, subsets=None, jobs: int = 1) -> list[dict]:
    """One row per subset; cells run on a bounded thread pool and keep the input order.

    Each cell works on its own copy of the model.
    """
    subsets = subsets or all_subsets(test.n_modalities)

    def cell(sub):
        row = evaluate_subset(copy.deepcopy(model), grid, test, sub)
        row["train_pct"] = pattern_share(train.present, sub)
        return row

    if jobs <= 1:
        return [cell(s) for s in subsets]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(cell, subsets))
