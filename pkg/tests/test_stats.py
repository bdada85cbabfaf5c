import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparse_ct_lab.stats import AllZeroDifferences, PairedSample, clustered_wilcoxon

from oracles import cluster_signflip_exact_two_sided, wilcoxon_exact_two_sided


def singleton_samples(diffs):
    return [PairedSample(cluster_id=i, value_processed=float(d), value_sparse=0.0)
            for i, d in enumerate(diffs)]


def test_singleton_clusters_match_exact_enumeration():
    diffs = [1, 2, 3, -1, -2, 4, 5, -3, 6, 7]
    p = clustered_wilcoxon(singleton_samples(diffs))
    p_exact = wilcoxon_exact_two_sided(diffs)
    assert abs(p - p_exact) < 0.02


def test_antisymmetric_clusters_statistic_zero_p_one():
    samples = []
    for c in range(4):
        d = 0.5 + c
        samples.append(PairedSample(c, d, 0.0))
        samples.append(PairedSample(c, -d, 0.0))
    assert clustered_wilcoxon(samples) == 1.0


def test_five_clusters_of_three_dominance():
    # within-cluster magnitudes are similar (subject effect), all positive
    samples = []
    for c in range(5):
        for j in range(3):
            samples.append(PairedSample(c, 0.1 * (c + 1) + 0.01 * j, 0.0))
    p = clustered_wilcoxon(samples)
    assert p < 0.05
    diffs = [s.difference for s in samples]
    clusters = [s.cluster_id for s in samples]
    p_exact = cluster_signflip_exact_two_sided(diffs, clusters)
    assert abs(p - p_exact) < 0.02


def test_all_zero_differences_is_signaled():
    samples = [PairedSample(c, 1.0, 1.0) for c in range(4)]
    with pytest.raises(AllZeroDifferences):
        clustered_wilcoxon(samples)


def test_fewer_than_two_clusters_rejected():
    samples = [PairedSample(0, 1.0, 0.0), PairedSample(0, 2.0, 0.0)]
    with pytest.raises(ValueError):
        clustered_wilcoxon(samples)


def test_zero_differences_dropped_not_counted():
    # zeros contribute nothing; result equals the same test without them
    base = [PairedSample(c, float(d), 0.0)
            for c, d in enumerate([1, -2, 3, 4, -1], start=0)]
    padded = base + [PairedSample(c, 5.0, 5.0) for c in range(5)]
    assert clustered_wilcoxon(base) == clustered_wilcoxon(padded)


def test_invariance_under_cluster_relabeling_and_rescaling():
    rng = np.random.default_rng(9)
    diffs = rng.normal(0.2, 1.0, size=12)
    clusters = [i // 3 for i in range(12)]
    samples = [PairedSample(c, float(d), 0.0) for c, d in zip(clusters, diffs)]
    p0 = clustered_wilcoxon(samples)

    relabeled = [PairedSample(f"subject-{c}", float(d), 0.0)
                 for c, d in zip(clusters, diffs)]
    assert clustered_wilcoxon(relabeled) == p0

    rescaled = [PairedSample(c, float(3.7 * d), 0.0)
                for c, d in zip(clusters, diffs)]
    assert clustered_wilcoxon(rescaled) == p0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False, width=32),
                min_size=8, max_size=12))
def test_singleton_reduction_tracks_exact_oracle(diffs):
    if sum(d != 0 for d in diffs) < 8:
        return  # normal approximation needs a few effective observations
    p = clustered_wilcoxon(singleton_samples(diffs))
    p_exact = wilcoxon_exact_two_sided(diffs)
    # continuous diffs (no ties): the approximation stays near the exact law
    assert abs(p - p_exact) < 0.1
    assert 0.0 <= p <= 1.0
