"""Idleness metrics, relative normalisation and rank-based significance testing."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy import special


@dataclass(frozen=True)
class IdlenessSummary:
    mean_idleness: float
    mean_max_idleness: float
    per_vertex_mean: np.ndarray
    per_vertex_max: np.ndarray


def summarize(log_or_idleness) -> IdlenessSummary:
    """Mean of per-tick vertex means, and mean over vertices of each vertex's maximum.

    Accepts a ``SimLog`` or a ``(ticks, vertices)`` idleness array. Every
    tick counts, including the start-up transient.
    """
    idle = np.asarray(getattr(log_or_idleness, "idleness", log_or_idleness), dtype=float)
    if idle.ndim != 2 or idle.size == 0:
        raise ValueError("cannot summarise an empty log")
    per_mean = idle.mean(axis=0)
    per_max = idle.max(axis=0)
    return IdlenessSummary(float(idle.mean(axis=1).mean()), float(per_max.mean()), per_mean, per_max)


def relative_idleness(table: dict) -> dict:
    """Divide each scenario's values by the best (lowest) value in that scenario.

    ``table`` maps scenario -> {strategy: value}.
    """
    out = {}
    for scenario, row in table.items():
        best = min(row.values())
        if best <= 0:
            raise ValueError(f"scenario {scenario!r}: best value {best} is not positive")
        out[scenario] = {k: v / best for k, v in row.items()}
    return out


def relative_to_reference(curve: dict, reference) -> dict:
    """Normalise a curve (e.g. p(f) -> mean idleness) by its value at ``reference``."""
    base = curve[reference]
    if base <= 0:
        raise ValueError(f"reference value {base} is not positive")
    return {k: v / base for k, v in curve.items()}


def communication_table(runs: dict) -> dict:
    """Relative mean idleness against message failure probability.

    ``runs`` maps ``(map, p_f) -> list of per-run mean idleness``. Per map
    the run means are averaged, divided by that map's ``p_f = 0`` average,
    then averaged over maps. Returns ``{p_f: relative idleness}``.
    """
    maps = sorted({m for m, _ in runs})
    pfs = sorted({p for _, p in runs})
    rel = {p: [] for p in pfs}
    for m in maps:
        curve = {p: float(np.mean(runs[m, p])) for p in pfs if (m, p) in runs}
        for p, v in relative_to_reference(curve, 0.0 if 0.0 in curve else min(curve)).items():
            rel[p].append(v)
    return {p: float(np.mean(v)) for p, v in rel.items()}


def chi_square_sf(x: float, dof: float) -> float:
    """Upper tail of the chi-square distribution (regularised upper incomplete gamma)."""
    if dof <= 0:
        raise ValueError("degrees of freedom must be positive")
    if x <= 0:
        return 1.0
    return float(special.gammaincc(dof / 2.0, x / 2.0))


def normal_sf(z: float) -> float:
    return float(0.5 * special.erfc(z / np.sqrt(2.0)))


def _pooled_ranks(groups):
    if len(groups) < 2:
        raise ValueError("need at least two groups")
    groups = [np.asarray(g, dtype=float).ravel() for g in groups]
    if any(len(g) == 0 for g in groups):
        raise ValueError("empty group")
    pooled = np.concatenate(groups)
    order = np.argsort(pooled, kind="mergesort")
    ranks = np.empty(len(pooled))
    sorted_vals = pooled[order]
    i = 0
    tie_sum = 0.0
    while i < len(pooled):
        j = i
        while j + 1 < len(pooled) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        t = j - i + 1
        tie_sum += t ** 3 - t
        i = j + 1
    sizes = np.array([len(g) for g in groups])
    splits = np.split(ranks, np.cumsum(sizes)[:-1])
    return splits, sizes, len(pooled), tie_sum


def kruskal_wallis(groups) -> tuple[float, float]:
    """H statistic (tie-corrected) and chi-square p-value with ``groups - 1`` dof."""
    ranks, sizes, n, tie_sum = _pooled_ranks(groups)
    h = 12.0 / (n * (n + 1)) * sum(r.sum() ** 2 / k for r, k in zip(ranks, sizes)) - 3.0 * (n + 1)
    correction = 1.0 - tie_sum / (n ** 3 - n)
    if correction <= 0:  # every value tied
        return 0.0, 1.0
    h = max(h / correction, 0.0)
    return float(h), chi_square_sf(h, len(sizes) - 1)


def dunns_test(groups) -> dict[tuple[int, int], tuple[float, float]]:
    """Pairwise Dunn z statistics and two-sided raw p-values, keyed by group index pair."""
    ranks, sizes, n, tie_sum = _pooled_ranks(groups)
    mean_ranks = [r.mean() for r in ranks]
    var = (n * (n + 1) / 12.0) - tie_sum / (12.0 * (n - 1)) if n > 1 else 0.0
    out = {}
    for i, j in combinations(range(len(sizes)), 2):
        se = np.sqrt(var * (1.0 / sizes[i] + 1.0 / sizes[j]))
        diff = mean_ranks[i] - mean_ranks[j]
        z = 0.0 if se == 0 or diff == 0 else diff / se
        out[i, j] = (float(z), min(1.0, 2.0 * normal_sf(abs(z))))
    return out


def holm_bonferroni(pvalues) -> np.ndarray:
    """Holm step-down adjustment, returned in the input order."""
    p = np.asarray(pvalues, dtype=float)
    m = len(p)
    order = np.argsort(p, kind="mergesort")
    adjusted = np.empty(m)
    running = 0.0
    for rank, idx in enumerate(order):
        running = max(running, min(1.0, (m - rank) * p[idx]))
        adjusted[idx] = running
    return adjusted


def pairwise_comparison(samples: dict) -> dict:
    """Kruskal-Wallis then Holm-adjusted Dunn tests across named samples.

    Returns the omnibus result and a symmetric matrix of adjusted p-values.
    """
    names = list(samples)
    groups = [samples[k] for k in names]
    h, p = kruskal_wallis(groups)
    dunn = dunns_test(groups)
    pairs = list(dunn)
    adjusted = holm_bonferroni([dunn[k][1] for k in pairs])
    matrix = {a: {b: None for b in names} for a in names}
    for (i, j), adj in zip(pairs, adjusted):
        matrix[names[i]][names[j]] = matrix[names[j]][names[i]] = float(adj)
    return {
        "kruskal_wallis": {"H": h, "p": p, "groups": names},
        "dunn": {f"{names[i]}|{names[j]}": {"z": dunn[i, j][0], "p_raw": dunn[i, j][1], "p_adjusted": float(adj)}
                 for (i, j), adj in zip(pairs, adjusted)},
        "p_matrix": matrix,
    }
