"""Cluster-adjusted Wilcoxon signed-rank test.

Paired observations that share a cluster (here: the same subject rated by
several readers, or the same reader across subjects) are correlated, so
the ordinary signed-rank null variance is wrong. Following the
Rosner-Glynn-Lee construction, nonzero differences are mid-ranked across
the pooled sample, signed rank sums are formed per cluster, and the
statistic T = sum_i S_i is referred to a normal with variance estimated
by sum_i S_i^2 (clusters are independent and zero-mean under the null).
With every cluster a singleton this reduces to the usual signed-rank
normal approximation with tie correction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as st


class AllZeroDifferences(ValueError):
    """Every paired difference is zero; the test is undefined."""


@dataclass(frozen=True)
class PairedSample:
    cluster_id: str | int
    value_processed: float
    value_sparse: float

    def __post_init__(self):
        if not (np.isfinite(self.value_processed) and np.isfinite(self.value_sparse)):
            raise ValueError("paired values must be finite")

    @property
    def difference(self) -> float:
        return self.value_processed - self.value_sparse


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    sv = values[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def clustered_wilcoxon(samples: list[PairedSample]) -> float:
    """Two-sided p-value for processed-vs-sparse differences.

    Zero differences are dropped (Wilcoxon convention; ordinal scales tie
    often), tied magnitudes are mid-ranked. Raises AllZeroDifferences when
    nothing remains.
    """
    if len({s.cluster_id for s in samples}) < 2:
        raise ValueError("need at least 2 clusters")
    diffs = np.array([s.difference for s in samples], dtype=np.float64)
    clusters = np.array([s.cluster_id for s in samples])
    keep = diffs != 0.0
    if not keep.any():
        raise AllZeroDifferences("all paired differences are zero")
    diffs = diffs[keep]
    clusters = clusters[keep]

    ranks = _midranks(np.abs(diffs))
    signed = np.sign(diffs) * ranks
    labels = list(dict.fromkeys(clusters.tolist()))
    cluster_sums = np.array([signed[clusters == c].sum() for c in labels])
    t_stat = float(cluster_sums.sum())
    var = float((cluster_sums ** 2).sum())
    if var == 0.0:
        return 1.0  # perfectly antisymmetric within clusters
    z = t_stat / np.sqrt(var)
    return float(np.clip(2.0 * st.norm.sf(abs(z)), 0.0, 1.0))
