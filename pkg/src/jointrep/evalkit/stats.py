"""Interquartile mean and stratified bootstrap intervals."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from ..errors import UsageError


def iqm(values) -> float:
    """Mean of the values left after dropping floor(n/4) from each end."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    n = len(v)
    if n == 0:
        raise UsageError("iqm of an empty sequence")
    k = n // 4
    return float(np.mean(v[k: n - k]))


def stratified_bootstrap_ci(strata: Mapping[str, Sequence[float]] | Sequence[Sequence[float]],
                            n_resamples: int = 2000, level: float = 0.95,
                            rng: np.random.Generator | int | None = 0) -> tuple[float, float]:
    """Percentile interval of the pooled IQM, resampling within each stratum.

    ``strata`` maps a task name to its per-seed values (or is a list of such
    value lists).  Each resample draws len(stratum) values with replacement
    from every stratum and pools them before taking the IQM.
    """
    groups = list(strata.values()) if isinstance(strata, Mapping) else list(strata)
    groups = [np.asarray(g, dtype=float).ravel() for g in groups]
    if not groups or any(len(g) == 0 for g in groups):
        raise UsageError("bootstrap needs at least one nonempty stratum")
    if not 0.0 < level < 1.0:
        raise UsageError(f"confidence level must lie in (0, 1), got {level}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    stats = np.empty(n_resamples)
    for i in range(n_resamples):
        pooled = np.concatenate([g[rng.integers(0, len(g), len(g))] for g in groups])
        stats[i] = iqm(pooled)
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(stats, [tail, 100.0 - tail])
    return float(lo), float(hi)
