import numpy as np
import pytest

from artifact.gaussian import (ConditioningError, GaussianSpec, GradientKernel, GridSampler, MatrixError,
                               SeparableGaussianKernel, SizeError, bargmann_fock, condition, grid_covariance,
                               grid_field, kernel_from_config, load_grid_field, psd_cholesky, rng_for, sample,
                               save_grid_field)


def test_condition_examples():
    C = np.diag([1.0, 2.0, 3.0])
    spec = GaussianSpec(["a", "b", "c"], C)
    sub, mean = condition(spec, ["b"], [1.5])
    assert sub.labels == ("a", "c")
    assert np.allclose(sub.covariance, np.diag([1.0, 3.0])) and np.allclose(mean, 0)
    rho = 0.6
    sub, mean = condition(GaussianSpec(["x", "y"], [[1, rho], [rho, 1]]), ["y"], [0.0])
    assert sub.covariance[0, 0] == pytest.approx(1 - rho ** 2, rel=1e-14) and mean[0] == 0
    sub, mean = condition(spec, ["a", "b", "c"], [1.0, 2.0, 3.0])
    assert sub.labels == () and mean.shape == (0,)


def test_condition_determinant_identity():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(5, 5))
    C = A @ A.T + 0.1 * np.eye(5)
    spec = GaussianSpec(range(5), C)
    sub, _ = condition(spec, [0, 3])
    lhs = np.linalg.det(C)
    rhs = np.linalg.det(C[np.ix_([0, 3], [0, 3])]) * np.linalg.det(sub.covariance)
    assert abs(lhs - rhs) <= 1e-8 * abs(lhs)


def test_condition_singular():
    spec = GaussianSpec(["a", "b", "c"], [[1, 1, 0], [1, 1, 0], [0, 0, 1]])
    with pytest.raises(ConditioningError):
        condition(spec, ["a", "b"])


def test_condition_matches_rejection_sampling():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(3, 3))
    C = A @ A.T + 0.5 * np.eye(3)
    spec = GaussianSpec(["u", "v", "w"], C)
    X = sample(spec, seed=3, n=400_000)
    keep = np.abs(X[:, 2] - 0.4) < 0.02
    sub, mean = condition(spec, ["w"], [0.4])
    Y = X[keep, :2]
    n = len(Y)
    se_mean = np.sqrt(np.diag(sub.covariance) / n)
    assert np.all(np.abs(Y.mean(0) - mean) < 4 * se_mean + 0.02 * np.abs(C[:2, 2] / C[2, 2]))
    assert np.allclose(np.cov(Y.T), sub.covariance, atol=0.05 * np.abs(sub.covariance).max())


def test_sample_examples():
    assert np.all(sample(GaussianSpec([0, 1], np.zeros((2, 2))), 1, 10) == 0)
    X = sample(GaussianSpec([0, 1, 2], np.eye(3)), 5, 100_000)
    assert np.allclose(np.cov(X.T), np.eye(3), atol=0.02)
    assert np.array_equal(sample(GaussianSpec([0, 1], np.eye(2)), 7, 50),
                          sample(GaussianSpec([0, 1], np.eye(2)), 7, 50))
    with pytest.raises(MatrixError):
        GaussianSpec([0, 1], [[1, 2], [2, 1]])


def test_psd_cholesky_jitter():
    v = np.array([1.0, 2.0, 3.0])
    S = np.outer(v, v)
    L = psd_cholesky(S)
    assert np.allclose(L @ L.T, S, atol=1e-9)
    with pytest.raises(MatrixError):
        psd_cholesky(np.diag([1.0, -1.0]))


def test_grid_field_variance_and_correlation():
    bf = bargmann_fock(1)
    sampler = GridSampler(bf, 50.0, 0.1)
    vals = np.concatenate([sampler.field(11, r).channels[(0,)][:, 0][None] for r in range(100)])
    assert abs(vals.var() - 1) < 0.05
    lag = 10  # z = 1
    corr = np.mean(vals[:, :-lag] * vals[:, lag:]) / vals.var()
    assert abs(corr - np.exp(-0.5)) < 0.03


def test_grid_field_seeds():
    bf = bargmann_fock(1)
    a = grid_field(bf, 20.0, 0.1, seed=1).channels[(0,)]
    b = grid_field(bf, 20.0, 0.1, seed=1).channels[(0,)]
    assert np.array_equal(a, b)
    sampler = GridSampler(bf, 20.0, 0.5)
    X = np.array([sampler.field(1, r).channels[(0,)][:, 0] for r in range(400)])
    Y = np.array([sampler.field(2, r).channels[(0,)][:, 0] for r in range(400)])
    # nodes 5 apart are nearly uncorrelated; check each one separately
    P = X[:, ::10] * Y[:, ::10]
    se = P.std(axis=0, ddof=1) / np.sqrt(len(P))
    assert np.all(np.abs(P.mean(axis=0)) < 4 * se)


def test_kron_sampler_matches_exact_covariance():
    # empirical covariance of the separable path against the dense exact covariance
    bf = bargmann_fock(2)
    channels = [(0, 0), (1, 0), (0, 1)]
    sampler = GridSampler(bf, 1.0, 0.5, channels)
    draws = sampler.draw(0, range(20000))
    X = np.concatenate([draws[a][..., 0].reshape(20000, -1) for a in channels], axis=1)
    C = grid_covariance(bf, 1.0, 0.5, channels)
    assert np.allclose(np.cov(X.T), C, atol=0.05)
    dense = GridSampler(bf, 1.0, 0.5, channels, dense=True)
    D = dense.draw(0, range(20000))
    Y = np.concatenate([D[a][..., 0].reshape(20000, -1) for a in channels], axis=1)
    assert np.allclose(np.cov(Y.T), C, atol=0.05)


def test_grid_covariance_stationary():
    bf = bargmann_fock(1)
    C = grid_covariance(bf, 2.0, 0.25, [(0,), (1,)])
    n = 9
    for blk in (C[:n, :n], C[:n, n:], C[n:, n:]):
        for off in range(-n + 1, n):
            assert np.ptp(np.diagonal(blk, off)) < 1e-14


@pytest.mark.parametrize("kernel", [bargmann_fock(1), bargmann_fock(2), SeparableGaussianKernel(1, 1, 0.7),
                                    bargmann_fock(2, 2), GradientKernel(bargmann_fock(2))])
def test_kernel_symmetry(kernel):
    rng = np.random.default_rng(2)
    d = kernel.d
    Z = rng.normal(size=(10, d))
    for a in [(0,) * d, (1,) + (0,) * (d - 1), (0,) * (d - 1) + (2,)]:
        for b in [(0,) * d, (0,) * (d - 1) + (1,), (1,) * d]:
            lhs = kernel.deriv(a, b, -Z)
            rhs = kernel.deriv(b, a, Z).transpose(0, 2, 1)
            assert np.allclose(lhs, rhs, atol=1e-14)


def test_kernel_examples():
    bf = bargmann_fock(1)
    z = np.array([[0.0], [1.0]])
    assert np.allclose(bf(z)[:, 0, 0], [1.0, np.exp(-0.5)])
    assert bf.deriv((1,), (1,), [[0.0]])[0, 0, 0] == pytest.approx(1.0)
    assert bf.spectral_moment(2) == 3
    gk = GradientKernel(bargmann_fock(2))
    assert np.allclose(gk.deriv((0, 0), (0, 0), [[0.0, 0.0]])[0], np.eye(2))
    assert isinstance(kernel_from_config({"name": "gradient", "base": {"d": 2}}), GradientKernel)
    with pytest.raises(ValueError):
        kernel_from_config({"name": "matern"})


def test_save_load_roundtrip(tmp_path):
    gf = grid_field(bargmann_fock(2), 2.0, 0.5, [(0, 0), (1, 0)], seed=4, replica=2)
    p = tmp_path / "field.bin"
    save_grid_field(gf, p)
    back = load_grid_field(p)
    assert back.shape == gf.shape and back.seed == 4 and back.replica == 2
    for a in gf.channels:
        assert np.array_equal(back.channels[a], gf.channels[a])


def test_size_error():
    with pytest.raises(SizeError):
        GridSampler(bargmann_fock(2), 20.0, 0.1, dense=True)
    with pytest.raises(SizeError):
        GridSampler(bargmann_fock(1), 3000.0, 0.1)


def test_rng_streams():
    a = rng_for(1, 0).standard_normal(5)
    assert np.array_equal(a, rng_for(1, 0).standard_normal(5))
    assert not np.array_equal(a, rng_for(1, 1).standard_normal(5))
