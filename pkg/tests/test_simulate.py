import math

import numpy as np
import pytest
from scipy import stats

from artifact.gaussian import GradientKernel, GridField, GridSampler, bargmann_fock
from artifact.kacrice import gamma1
from artifact.simulate import (ConfigError, ExperimentConfig, MissingChannelError, conditional_mean_weights,
                               count_critical_points_2d, count_zeros_1d, critical_points_2d, jackknife_kstats,
                               kstats, nodal_length_2d, nodal_segments_2d, refine_1d, run_experiment,
                               sign_changes, simulate_statistic, summarize, weighted_count_1d, window_seed,
                               _segments_measure, extrapolate_variance)


def field_1d(values, h=0.1, slopes=None):
    ch = {(0,): np.asarray(values, float)[:, None]}
    if slopes is not None:
        ch[(1,)] = np.asarray(slopes, float)[:, None]
    return GridField(1, h, (0.0,), (len(values),), ch)


def field_2d(f, h, origin):
    f = np.asarray(f, float)
    if f.ndim == 2:
        f = f[..., None]
    return GridField(2, h, tuple(origin), f.shape[:2], {(0, 0): f})


def test_zero_count_examples():
    assert count_zeros_1d(field_1d(np.full(50, 2.0))) == 0
    x = np.linspace(0, 1, 400)
    v = np.sin(7 * np.pi * x + 0.3)
    assert count_zeros_1d(field_1d(v)) == 7
    assert count_zeros_1d(field_1d(v, slopes=np.cos(7 * np.pi * x)), refine=True, kernel=bargmann_fock(1)) == 7
    with pytest.raises(MissingChannelError):
        count_zeros_1d(field_1d(v), refine=True, kernel=bargmann_fock(1))


def test_sign_changes_with_exact_zeros():
    assert sign_changes(np.array([1.0, 0.0, -1.0])) == 1
    assert sign_changes(np.array([1.0, 0.0, 1.0])) == 0
    assert sign_changes(np.array([[-1.0, 1.0, -1.0], [1.0, 1.0, 1.0]])).tolist() == [2, 0]


def test_refinement_catches_double_crossing():
    # a narrow dip below zero inside one cell is invisible on the nodes
    h = 0.5
    W = conditional_mean_weights(bargmann_fock(1), h)
    f = np.array([[0.02, 0.02]])
    g = np.array([[-1.0, 1.0]])
    assert sign_changes(f)[0] == 0
    assert sign_changes(refine_1d(f, g, W))[0] == 2


def test_conditional_mean_reproduces_endpoints():
    W = conditional_mean_weights(bargmann_fock(1), 0.1, steps=4)
    assert W.shape == (3, 4)
    # the interpolant of a constant field is close to that constant for small h
    assert np.allclose(W @ np.array([1.0, 0.0, 1.0, 0.0]), 1.0, atol=1e-3)


def test_straight_nodal_line():
    h = 0.1
    xs = np.arange(0, 10 + h / 2, h)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    L = nodal_length_2d(field_2d(X - 3.33, h, (0.0, 0.0)))
    assert abs(L - 10.0) <= h


def test_circle_nodal_line():
    h = 0.1
    xs = np.arange(-8, 8 + h / 2, h)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    L = nodal_length_2d(field_2d(X ** 2 + Y ** 2 - 25.0, h, (-8.0, -8.0)))
    assert L == pytest.approx(2 * math.pi * 5, rel=0.01)


def test_nodal_segments_saddle_cell():
    # the centre average decides how an ambiguous cell is split
    f = np.array([[1.0, -1.0], [-1.0, 1.0]])
    S = nodal_segments_2d(f, 1.0)
    assert len(S) == 2


def _quadratic_gradient(h, origin, n, centre):
    xs = origin[0] + h * np.arange(n)
    ys = origin[1] + h * np.arange(n)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    g = np.stack([2 * (X - centre[0]), 4 * (Y - centre[1])], -1)
    return field_2d(g, h, origin)


def test_critical_points_quadratic():
    gf = _quadratic_gradient(0.1, (0.0, 0.0), 51, (2.03, 3.01))
    assert count_critical_points_2d(gf) == 1
    assert np.allclose(critical_points_2d(gf)[0], [2.03, 3.01], atol=1e-9)
    moved = _quadratic_gradient(0.1, (1.0, -0.5), 51, (3.03, 2.51))
    assert count_critical_points_2d(moved) == 1
    with pytest.raises(MissingChannelError):
        critical_points_2d(field_2d(np.zeros((5, 5)), 0.1, (0.0, 0.0)))


def test_weighted_statistics_linear():
    sampler = GridSampler(bargmann_fock(1), 30.0, 0.1, [(0,), (1,)])
    ch = sampler.draw(3, range(10))
    W = conditional_mean_weights(bargmann_fock(1), 0.1)
    f, g = ch[(0,)][..., 0], ch[(1,)][..., 0]
    p1 = lambda z: np.exp(-((z - 10) / 5) ** 2)
    p2 = lambda z: np.cos(z / 3.0)
    a = weighted_count_1d(f, 0.1, p1, slopes=g, weights=W)
    b = weighted_count_1d(f, 0.1, p2, slopes=g, weights=W)
    c = weighted_count_1d(f, 0.1, lambda z: p1(z) + p2(z), slopes=g, weights=W)
    assert np.allclose(a + b, c, rtol=1e-13, atol=1e-13)
    ones = weighted_count_1d(f, 0.1, np.ones_like, slopes=g, weights=W)
    assert np.array_equal(ones, sign_changes(refine_1d(f, g, W)).astype(float))
    f2 = GridSampler(bargmann_fock(2), 10.0, 0.25).field(1).channels[(0, 0)][..., 0]
    S = nodal_segments_2d(f2, 0.25)
    q1 = lambda z: z[:, 0] ** 2
    q2 = lambda z: np.sin(z[:, 1])
    lhs = _segments_measure(S, lambda z: q1(z) + q2(z))
    assert lhs == pytest.approx(_segments_measure(S, q1) + _segments_measure(S, q2), rel=1e-12)


def test_kstats_against_scipy():
    x = np.random.default_rng(0).gamma(2.0, size=500)
    k = kstats(x)
    assert np.allclose(k, [stats.kstat(x, n) for n in (2, 3, 4)], rtol=1e-10)
    with pytest.raises(ValueError):
        kstats(np.ones(3))


def test_jackknife_on_normal_sample():
    x = np.random.default_rng(1).standard_normal(3000)
    k, se = jackknife_kstats(x)
    assert abs(k[0] - 1) < 4 * se[0]
    assert abs(k[1]) < 4 * se[1] and abs(k[2]) < 4 * se[2]
    s = summarize(x)
    assert abs(s["m4"] - 3) < 0.3 and s["replicas"] == 3000


def test_extrapolation_recovers_affine_law():
    T = np.array([50.0, 100.0, 200.0])
    var = 0.18 * T + 0.7
    out = extrapolate_variance(T, var, np.ones(3))
    assert out["intercept"] == pytest.approx(0.18, abs=1e-12)
    assert out["slope"] == pytest.approx(0.7, abs=1e-10)


def test_grid_halving_1d():
    kernel = bargmann_fock(1)
    fine = GridSampler(kernel, 100.0, 0.05, [(0,), (1,)]).draw(5, range(300))
    f, g = fine[(0,)][..., 0], fine[(1,)][..., 0]
    n_fine = sign_changes(refine_1d(f, g, conditional_mean_weights(kernel, 0.05)))
    n_coarse = sign_changes(refine_1d(f[:, ::2], g[:, ::2], conditional_mean_weights(kernel, 0.1)))
    assert abs(n_fine.mean() - n_coarse.mean()) < 0.002 * n_fine.mean()


def test_grid_halving_2d():
    fine = GridSampler(bargmann_fock(2), 20.0, 0.125).draw(6, range(20))[(0, 0)][..., 0]
    a = np.array([_segments_measure(nodal_segments_2d(x, 0.125)) for x in fine])
    b = np.array([_segments_measure(nodal_segments_2d(x[::2, ::2], 0.25)) for x in fine])
    assert abs(a.mean() - b.mean()) < 0.01 * a.mean()


def test_threads_do_not_change_results():
    k = bargmann_fock(1)
    a = simulate_statistic(k, "zeros", 20.0, 100, 7, 0.1, True, chunk=16, threads=1)
    b = simulate_statistic(k, "zeros", 20.0, 100, 7, 0.1, True, chunk=16, threads=3)
    assert np.array_equal(a, b)
    assert window_seed(1, 0) != window_seed(1, 1)


def test_law_of_large_numbers_column():
    # the open-window count is unbiased at every R, so each mean sits within
    # its own standard error of gamma_1 and the standard error shrinks with R
    out = run_experiment({"mode": "zeros", "dim": 1, "windows": [25, 50, 100], "replicas": 2000})
    g = 1 / math.pi
    se = []
    for row in out["rows"]:
        s = row["mean_stderr"] / row["R"]
        assert abs(row["mean_per_volume"] - g) < 3 * s + 0.003 * g
        se.append(s)
    assert se[0] > se[1] > se[2]
    assert "variance_extrapolation" in out


def test_critical_points_2d_mean():
    kernel = GradientKernel(bargmann_fock(2))
    vals = simulate_statistic(kernel, "critical-points", 30.0, 200, 8, 0.1)
    target = gamma1(kernel).value * 900
    assert vals.mean() == pytest.approx(target, rel=0.05)


def test_config_validation():
    with pytest.raises(ConfigError, match="replicas: required"):
        ExperimentConfig.from_dict({"mode": "zeros", "dim": 1, "windows": [10]})
    with pytest.raises(ConfigError, match="mode: zeros needs dim 1"):
        ExperimentConfig.from_dict({"mode": "zeros", "dim": 2, "windows": [10], "replicas": 10})
    with pytest.raises(ConfigError, match="windows"):
        ExperimentConfig.from_dict({"mode": "zeros", "dim": 1, "windows": [-1], "replicas": 10})
    with pytest.raises(ConfigError, match="bogus: unknown field"):
        ExperimentConfig.from_dict({"mode": "zeros", "dim": 1, "windows": [1], "replicas": 10, "bogus": 1})
    cfg = ExperimentConfig.from_dict({"mode": "critical-points", "dim": 1, "windows": [10], "replicas": 10})
    assert cfg.spacing == 0.1 and isinstance(cfg.field_kernel(), GradientKernel)
