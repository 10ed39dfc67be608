import logging
from dataclasses import replace

import numpy as np
import pytest

from conftest import random_class
from noisyproto.cleaner import (
    CleanerConfig,
    GcnParams,
    binary_cleaning_loss,
    constant_scores,
    default_hidden,
    fixed_cluster_groups,
    full_objective,
    gcn_backward,
    gcn_forward,
    gcn_forward_cached,
    negative_cosine,
    simnoipro_loss,
    simnoipro_objective,
    similarity_scores,
    train_cleaner,
)
from noisyproto.dataio import FeatureSet, RelevanceScores, SynthSpec, synthesize
from noisyproto.errors import ContractError, DegenerateLossError, DegeneratePrototypeError, ParameterError
from noisyproto.graph import AffinityGraph, build_affinity, class_graph
from noisyproto.numerics import AdamState, adam_step, finite_diff_gradient, relative_error, schedule_rate
from noisyproto.prototypes import unified_prototype


def _fd_check(params, graph, fs, cfg, groups=None):
    _, (g1, g2) = full_objective(params, graph, fs, cfg, groups)

    def f1(t1):
        return full_objective(GcnParams(t1, params.theta2), graph, fs, cfg, groups)[0]

    def f2(t2):
        return full_objective(GcnParams(params.theta1, t2), graph, fs, cfg, groups)[0]

    return relative_error(g1, finite_diff_gradient(f1, params.theta1)), relative_error(g2, finite_diff_gradient(f2, params.theta2))


def test_gcn_forward_hand_example():
    fs = FeatureSet(np.array([[1.0, 2.0]]), 1)
    g = AffinityGraph(np.eye(2), normalized=True)
    r = gcn_forward(GcnParams(np.array([[1.0]]), np.array([[1.0]])), g, fs).values
    assert r == pytest.approx([0.7310585786, 0.8807970780])


def test_gcn_forward_zero_theta2(rng):
    fs = random_class(rng)
    p = GcnParams.init(8, 16, 0)
    p = GcnParams(p.theta1, np.zeros_like(p.theta2))
    assert np.array_equal(gcn_forward(p, class_graph(fs, 3), fs).values, np.full(12, 0.5))


def test_gcn_forward_requires_normalized_graph(rng):
    fs = random_class(rng)
    with pytest.raises(ContractError):
        gcn_forward(GcnParams.init(8, 4, 0), build_affinity(fs, 3), fs)


def test_gcn_forward_equivariant_and_in_range(rng):
    fs = random_class(rng, n=10)
    g = class_graph(fs, 3)
    p = GcnParams.init(8, 6, 1)
    r = gcn_forward(p, g, fs).values
    assert np.all((r > 0) & (r < 1))
    perm = rng.permutation(10)
    gp = AffinityGraph(g.adjacency[np.ix_(perm, perm)], normalized=True)
    rp = gcn_forward(p, gp, FeatureSet(fs.V[:, perm], 0)).values
    assert np.allclose(rp, r[perm], atol=1e-15)


def test_gcn_backward_zero_upstream_and_dead_relu(rng):
    fs = random_class(rng)
    g = class_graph(fs, 3)
    p = GcnParams.init(8, 4, 0)
    cache = gcn_forward_cached(p, g, fs.V)
    g1, g2 = gcn_backward(p, g, cache, np.zeros(12))
    assert not g1.any() and not g2.any()
    # ReLU fully inactive: theta1 maps every example to a negative pre-activation
    V = np.abs(fs.V)
    dead = GcnParams(-np.ones((8, 4)), np.ones((4, 1)))
    g_abs = class_graph(V, 3)
    c = gcn_forward_cached(dead, g_abs, V)
    _, g2 = gcn_backward(dead, g_abs, c, np.ones(12))
    assert not g2.any()


def test_gcn_backward_matches_fd(rng):
    fs = random_class(rng, d=5, n=6, k=2)
    g = class_graph(fs, 3)
    p = GcnParams.init(5, 4, 2)
    w = rng.normal(size=6)

    def f(t1, t2):
        return float(w @ gcn_forward_cached(GcnParams(t1, t2), g, fs.V).r)

    cache = gcn_forward_cached(p, g, fs.V)
    g1, g2 = gcn_backward(p, g, cache, w)
    assert relative_error(g1, finite_diff_gradient(lambda t: f(t, p.theta2), p.theta1)) < 1e-4
    assert relative_error(g2, finite_diff_gradient(lambda t: f(p.theta1, t), p.theta2)) < 1e-4


def test_negative_cosine_examples():
    p = np.array([1.0, 2.0, -1.0])
    assert negative_cosine(p, p) == pytest.approx(-1.0)
    assert negative_cosine(p, -p) == pytest.approx(1.0)
    assert negative_cosine([1.0, 0.0], [0.0, 1.0]) == 0.0
    with pytest.raises(DegeneratePrototypeError):
        negative_cosine([0.0, 0.0], [1.0, 0.0])


def test_binary_loss_example_and_limit():
    loss, _ = binary_cleaning_loss(RelevanceScores(np.array([0.5, 0.5]), 1))
    assert loss == pytest.approx(2 * np.log(2))
    near, _ = binary_cleaning_loss(RelevanceScores(np.array([1 - 1e-9, 1e-9, 1e-9]), 1))
    assert near < 1e-8


def test_binary_loss_gradient(rng):
    for lam in (1.0, 0.3):
        r0 = rng.uniform(0.05, 0.95, size=7)
        _, g = binary_cleaning_loss(RelevanceScores(r0, 2), lam)
        fd = finite_diff_gradient(lambda r: binary_cleaning_loss(RelevanceScores(r, 2), lam)[0], r0)
        assert np.max(np.abs(g - fd)) < 1e-6


def test_binary_loss_clamps_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        loss, _ = binary_cleaning_loss(RelevanceScores(np.array([1.0, 0.0]), 1))
    assert np.isfinite(loss)
    assert "clamped" in caplog.text


def test_simnoipro_examples():
    p = np.array([1.0, 2.0])
    assert simnoipro_loss(p, [p], np.array([3.0, 1.0]), [1.0], 0.0) == pytest.approx(-1.0)
    assert simnoipro_loss([1.0, 0.0], [[0.0, 0.0]], [0.0, 5.0], [0.0], 1.0) == pytest.approx(0.0)


def test_simnoipro_skips_empty_windows():
    pc = np.array([1.0, 0.0])
    windows = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    # only windows 0 and 2 count; divisor is 2
    val = simnoipro_loss(pc, windows, pc, [1.0, 1.0, 1.0], 0.0)
    assert val == pytest.approx((-1.0 + 0.0) / 2)


def test_simnoipro_degenerate():
    with pytest.raises(DegenerateLossError):
        simnoipro_loss([1.0, 0.0], np.zeros((2, 3)), [1.0, 1.0], [1.0, 1.0, 1.0], 0.0)


def test_simnoipro_minimize_negates(rng):
    pc, pg = rng.normal(size=4), rng.normal(size=4)
    W = rng.normal(size=(4, 3))
    a = [0.2, 0.6, 1.0]
    assert simnoipro_loss(pc, W, pg, a, 0.7, minimize=True) == pytest.approx(-simnoipro_loss(pc, W, pg, a, 0.7))


def test_simnoipro_scale_invariance(rng):
    for _ in range(20):
        pc, pg = rng.normal(size=5), rng.normal(size=5)
        W = rng.normal(size=(5, 3))
        a = rng.uniform(0, 1, size=3)
        base = simnoipro_loss(pc, W, pg, a, 0.5)
        s = rng.uniform(0.1, 10, size=5)
        scaled = simnoipro_loss(s[0] * pc, W * s[1:4], s[4] * pg, a, 0.5)
        assert scaled == pytest.approx(base, abs=1e-12)


@pytest.mark.parametrize(
    "cfg",
    [
        CleanerConfig(T=3),
        CleanerConfig(T=3, loss="simmin"),
        CleanerConfig(loss="binary", lam=0.7),
        CleanerConfig(T=2, grouping="kmeans"),
        CleanerConfig(T=4, alpha_schedule="decreasing", beta=0.0),
    ],
)
def test_full_objective_gradient(rng, cfg):
    fs = random_class(rng, d=6, n=14, k=3)
    g = class_graph(fs, 4)
    p = GcnParams.init(6, 5, 3)
    groups = None
    if cfg.grouping == "kmeans":
        groups = fixed_cluster_groups(fs, cfg)
    e1, e2 = _fd_check(p, g, fs, cfg, groups)
    assert e1 < 1e-4 and e2 < 1e-4


def test_alphas():
    assert CleanerConfig(T=5).alphas() == pytest.approx([0.2, 0.4, 0.6, 0.8, 1.0])
    assert CleanerConfig(T=3, alpha_schedule="decreasing").alphas() == pytest.approx([1.0, 0.6, 0.2])
    assert CleanerConfig(T=4, alpha_schedule="equal").alphas() == pytest.approx([1.0] * 4)
    assert CleanerConfig(T=1).alphas() == pytest.approx([1.0])


@pytest.mark.parametrize("bad", [dict(T=0), dict(iterations=0), dict(loss="x"), dict(beta=-1.0), dict(lr=0.0)])
def test_config_validation(bad):
    with pytest.raises(ParameterError):
        CleanerConfig(**bad)


@pytest.fixture(scope="module")
def default_class():
    return synthesize(SynthSpec()).classes[0]


def _ups_per_window(losses, width=30):
    ups = np.diff(losses) > 0
    return max(int(ups[s : s + width].sum()) for s in range(0, len(ups) - width + 1))


def test_training_trace_finite(default_class):
    res = train_cleaner(default_class, None, CleanerConfig())
    losses = np.array([t.loss for t in res.trace])
    assert len(losses) == 100 and np.all(np.isfinite(losses))
    assert losses[-1] < losses[0]
    assert res.trace_csv().startswith("iteration,loss,mean_clean_r,mean_noisy_r\n")


def test_each_step_descends_under_its_own_grouping(default_class):
    """Replays the training loop and scores every update against the grouping it was computed with."""
    fs, cfg = default_class, CleanerConfig()
    g = class_graph(fs, cfg.k_neighbors)
    p = GcnParams.init(fs.d, default_hidden(fs.d), cfg.seed)
    s1 = AdamState.zeros_like(p.theta1, weight_decay=cfg.weight_decay)
    s2 = AdamState.zeros_like(p.theta2, weight_decay=cfg.weight_decay)
    before, after = [], []
    for it in range(cfg.iterations):
        c = gcn_forward_cached(p, g, fs.V)
        loss, grad_r, groups = simnoipro_objective(fs, c.r, cfg)
        g1, g2 = gcn_backward(p, g, c, grad_r)
        lr = schedule_rate(cfg.schedule(), it)
        p = GcnParams(adam_step(p.theta1, g1, s1, lr), adam_step(p.theta2, g2, s2, lr))
        before.append(loss)
        after.append(simnoipro_objective(fs, gcn_forward_cached(p, g, fs.V).r, cfg, groups)[0])
    final = gcn_forward_cached(p, g, fs.V).r
    assert final.tobytes() == train_cleaner(fs, None, cfg).scores.values.tobytes()
    rises = np.array(after) > np.array(before)
    assert max(int(rises[s : s + 30].sum()) for s in range(0, len(rises) - 29)) <= 5


@pytest.mark.xfail(strict=True, reason="window membership is re-derived every iteration; the reported loss jumps when scores cross window edges")
def test_reported_trace_near_monotone(default_class):
    res = train_cleaner(default_class, None, CleanerConfig())
    assert _ups_per_window(np.array([t.loss for t in res.trace])) <= 5


def test_binary_training_raises_clean_scores(default_class):
    res = train_cleaner(default_class, None, CleanerConfig(loss="binary"))
    assert res.scores.values[: default_class.k].mean() > res.trace[0].mean_clean_r


def test_training_is_deterministic(default_class):
    a = train_cleaner(default_class, None, CleanerConfig(iterations=20))
    b = train_cleaner(default_class, None, CleanerConfig(iterations=20))
    assert a.scores.values.tobytes() == b.scores.values.tobytes()


def test_minimization_moves_prototype_away(default_class):
    cfg = CleanerConfig()
    cos = {}
    for loss in ("simnoipro", "simmin"):
        r = train_cleaner(default_class, None, replace(cfg, loss=loss)).scores
        h = unified_prototype(default_class, r, cfg.T)
        cos[loss] = -negative_cosine(h.p_unified, h.p_clean)
    assert cos["simmin"] < cos["simnoipro"]


def test_empty_noisy_set_rejected(rng):
    with pytest.raises(ParameterError):
        train_cleaner(FeatureSet(rng.normal(size=(3, 4)), 4), None, CleanerConfig())


def test_baselines(rng):
    fs = random_class(rng, d=4, n=6, k=2)
    c = constant_scores(fs, 0.3)
    assert c.values.tolist() == [1.0, 1.0] + [0.3] * 4
    s = similarity_scores(fs).values
    assert np.all((s >= 0) & (s <= 1)) and s[:2].tolist() == [1.0, 1.0]
