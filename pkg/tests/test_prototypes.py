import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_class, random_scores
from noisyproto.dataio import FeatureSet, RelevanceScores
from noisyproto.errors import ParameterError
from noisyproto.prototypes import (
    clean_prototype,
    global_noise_prototype,
    kmeans,
    kmeans_noise_prototypes,
    normalizer,
    order_clusters_by_clean_affinity,
    unified_prototype,
    window_partition,
    windowed_noise_prototypes,
)


def test_clean_prototype_examples():
    fs = FeatureSet(np.array([[1.0, 0.0, 5.0], [0.0, 1.0, 5.0]]), 2)
    assert np.array_equal(clean_prototype(fs, 2.0), [0.5, 0.5])
    assert np.array_equal(clean_prototype(fs, 4.0), [0.25, 0.25])
    one = FeatureSet(np.array([[3.0, 1.0], [4.0, 1.0]]), 1)
    assert np.array_equal(clean_prototype(one, 1.0), [3.0, 4.0])


def test_clean_prototype_needs_clean_examples():
    with pytest.raises(ParameterError):
        clean_prototype(FeatureSet(np.ones((2, 3)), 0), 1.0)


def test_window_partition_example():
    spec, a = window_partition(np.array([0.1, 0.3, 0.5, 0.9]), 2)
    assert a.tolist() == [0, 0, 1, 1]
    (lo0, hi0), (lo1, hi1) = spec.bounds()
    assert (lo0, hi0, hi1) == pytest.approx((0.1, 0.5, 0.9))
    assert lo1 == pytest.approx(0.5)


def test_window_partition_single_and_degenerate():
    assert window_partition(np.array([0.2, 0.7, 0.4]), 1)[1].tolist() == [0, 0, 0]
    spec, a = window_partition(np.full(4, 0.5), 5)
    assert spec.degenerate and a.tolist() == [4, 4, 4, 4]


def test_window_partition_reads_noisy_part_of_scores():
    r = RelevanceScores(np.array([1.0, 1.0, 0.1, 0.9]), 2)
    assert window_partition(r, 2)[1].tolist() == [0, 1]


def test_window_single_term_and_empty():
    fs = FeatureSet(np.array([[1.0, 2.0], [1.0, 0.0]]), 1)
    protos, empty = windowed_noise_prototypes(fs, np.array([1.0, 0.5]), np.array([1]), 3)
    assert np.array_equal(protos[:, 1], [1.0, 0.0])
    assert empty.tolist() == [True, False, True]
    assert np.array_equal(protos[:, 0], [0.0, 0.0])


def test_global_noise_examples():
    fs = FeatureSet(np.array([[1.0, 2.0], [1.0, 3.0]]), 1)
    assert np.array_equal(global_noise_prototype(fs, np.array([1.0, 0.0]), 1.0), [0.0, 0.0])
    assert np.array_equal(global_noise_prototype(fs, np.array([1.0, 1.0]), 1.0), [2.0, 3.0])


def test_unified_limits(rng):
    V = rng.normal(size=(3, 4))
    allclean = unified_prototype(FeatureSet(V, 4), np.ones(4), 3)
    assert np.allclose(allclean.p_unified, V.mean(axis=1), atol=1e-15)
    fs = FeatureSet(V, 2)
    h = unified_prototype(fs, np.array([1.0, 1.0, 1e-15, 1e-15]), 2)
    assert np.allclose(h.p_unified, h.p_clean, atol=1e-12)


def test_unified_matches_definition(rng):
    for _ in range(50):
        fs = random_class(rng, d=4, n=6, k=2)
        r = random_scores(rng, fs)
        h = unified_prototype(fs, r, 3)
        brute = sum(r[i] * fs.V[:, i] for i in range(fs.N)) / r.sum()
        assert np.max(np.abs(h.p_unified - brute)) < 1e-12
        assert np.array_equal(h.p_unified, h.p_clean + h.p_noise_global)
        assert h.normalizer >= fs.k
        assert h.normalizer == pytest.approx(normalizer(fs, r))


def test_window_additivity(rng):
    for _ in range(50):
        fs = random_class(rng, d=5, n=15, k=3)
        r = random_scores(rng, fs)
        h = unified_prototype(fs, r, 4)
        assert np.max(np.abs(h.window_protos.sum(axis=1) - h.normalizer * h.p_noise_global)) < 1e-12


def test_window_protos_permutation_invariant(rng):
    fs = random_class(rng, d=4, n=10, k=2)
    r = random_scores(rng, fs)
    perm = np.concatenate([np.arange(2), 2 + rng.permutation(8)])
    a = unified_prototype(fs, r, 3).window_protos
    b = unified_prototype(FeatureSet(fs.V[:, perm], 2), r[perm], 3).window_protos
    assert np.allclose(a, b, atol=1e-14)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(0, 1), min_size=1, max_size=40),
    st.integers(1, 10),
)
def test_partition_total_disjoint_covering(scores, T):
    r = np.array(scores)
    spec, a = window_partition(r, T)
    assert a.shape == r.shape
    assert np.all((a >= 0) & (a < T))
    if not spec.degenerate:
        bounds = spec.bounds()
        for x, t in zip(r, a):
            lo, hi = bounds[t]
            assert lo - 1e-12 <= x and (x < hi + 1e-12)


def test_kmeans_two_pairs():
    clean = np.array([[1.0], [1.0]])
    noisy = np.array([[0.0, 5.0, 0.1, 5.1], [0.0, 5.0, 0.0, 5.0]])
    fs = FeatureSet(np.hstack([clean, noisy]), 1)
    r = np.array([1.0, 0.5, 0.25, 0.75, 1.0])
    for seed in range(5):
        protos, a = kmeans_noise_prototypes(fs, r, 2, seed=seed)
        assert a[0] == a[2] != a[1] == a[3]
        assert np.allclose(protos[:, a[0]], 0.5 * noisy[:, 0] + 0.75 * noisy[:, 2])
        assert np.allclose(protos[:, a[1]], 0.25 * noisy[:, 1] + 1.0 * noisy[:, 3])


def test_kmeans_singletons(rng):
    fs = random_class(rng, d=3, n=6, k=2)
    r = random_scores(rng, fs)
    protos, a = kmeans_noise_prototypes(fs, r, 4, seed=3)
    assert sorted(a.tolist()) == [0, 1, 2, 3]
    for i in range(4):
        assert np.allclose(protos[:, a[i]], r[2 + i] * fs.noisy[:, i])


def test_kmeans_objective_nonincreasing_and_deterministic(rng):
    X = rng.normal(size=(4, 60))
    res = kmeans(X, 5, seed=11)
    assert all(b <= a + 1e-9 for a, b in zip(res.objective, res.objective[1:]))
    again = kmeans(X, 5, seed=11)
    assert np.array_equal(res.assignment, again.assignment)
    assert res.iterations <= 100


def test_kmeans_too_few_points(rng):
    fs = random_class(rng, d=3, n=4, k=2)
    with pytest.raises(ParameterError):
        kmeans_noise_prototypes(fs, np.ones(4), 3)


def test_cluster_order_follows_clean_affinity():
    clean = np.array([[1.0], [0.0]])
    far = np.array([[0.0, 0.1], [1.0, 1.0]])
    near = np.array([[1.0, 0.9], [0.1, 0.0]])
    fs = FeatureSet(np.hstack([clean, near, far]), 1)
    relabeled = order_clusters_by_clean_affinity(fs, np.array([0, 0, 1, 1]), 2)
    assert relabeled.tolist() == [1, 1, 0, 0]
