import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gnnwr.errors import CollinearityError, DegenerateTestError
from gnnwr.geodata import SpatialDataset
from gnnwr.olr import OlrModel, coefficient_tests, fit_olr, ols_hat_matrix, predict_olr, vif

from conftest import random_dataset
from oracles import aux_vif, exact_lstsq


def _ds(X, y):
    X = np.asarray(X, dtype=float)
    return SpatialDataset(X=X, y=np.asarray(y, dtype=float), names=tuple(f"v{j}" for j in range(1, X.shape[1])))


def test_two_point_line():
    X = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]])
    m = fit_olr(_ds(X, [1.0, 3.0, 5.0]), with_tests=False)
    np.testing.assert_allclose(m.beta_hat, [1.0, 2.0], atol=1e-14)
    assert m.rss == pytest.approx(0.0, abs=1e-25)


def test_duplicated_column_is_collinear():
    ds = random_dataset(20, 2, 0)
    X = np.column_stack([ds.X, ds.X[:, 1]])
    with pytest.raises(CollinearityError) as err:
        fit_olr(_ds(X, ds.y))
    assert err.value.columns


def test_matches_exact_elimination():
    ds = random_dataset(50, 3, 11)
    m = fit_olr(ds)
    np.testing.assert_allclose(m.beta_hat, exact_lstsq(ds.X, ds.y), atol=1e-8)


def test_predict_examples():
    m = OlrModel(beta_hat=np.array([1.0, 2.0]), sigma2_hat=1.0, rss=0.0, hat_trace=2.0, n=3, names=("x",))
    assert predict_olr(m, [1.0, 0.0]).tolist() == [1.0]
    assert predict_olr(m, [1.0, 3.0]).tolist() == [7.0]


def test_residuals_sum_to_zero():
    ds = random_dataset(60, 4, 5)
    m = fit_olr(ds)
    assert abs(np.sum(ds.y - predict_olr(m, ds.X))) < 1e-8


def test_normal_equation_residual():
    ds = random_dataset(80, 5, 9)
    b = fit_olr(ds).beta_hat
    g = ds.X.T @ (ds.y - ds.X @ b)
    assert np.max(np.abs(g)) < 1e-6 * np.max(np.abs(ds.X.T @ ds.y))


def test_noise_free_recovery():
    rng = np.random.default_rng(2)
    X = np.column_stack([np.ones(30), rng.standard_normal((30, 3))])
    beta = np.array([0.5, -1.0, 3.0, 2.0])
    np.testing.assert_allclose(fit_olr(_ds(X, X @ beta), with_tests=False).beta_hat, beta, rtol=1e-8)


def test_zero_variance_t_tests_raise():
    X = np.column_stack([np.ones(10), np.arange(10.0)])
    m = fit_olr(_ds(X, X @ [1.0, 2.0]), with_tests=False)
    m.sigma2_hat = 0.0
    with pytest.raises(DegenerateTestError):
        coefficient_tests(m, _ds(X, X @ [1.0, 2.0]))


def test_noise_covariate_calibration():
    rejections = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        X = np.column_stack([np.ones(200), rng.standard_normal((200, 2))])
        y = 1.0 + 2.0 * X[:, 1] + rng.standard_normal(200)
        rejections += fit_olr(_ds(X, y)).t_pvalues[1] < 0.05
    assert rejections <= 12


def test_strong_signal_is_significant():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(100)
    y = 3 * x + 1e-3 * rng.standard_normal(100)
    assert fit_olr(_ds(np.column_stack([np.ones(100), x]), y)).t_pvalues[0] < 1e-6


def test_vif_orthogonal():
    x1 = np.array([1.0, -1.0, 1.0, -1.0])
    x2 = np.array([1.0, 1.0, -1.0, -1.0])
    X = np.column_stack([np.ones(4), x1, x2])
    np.testing.assert_allclose(vif(_ds(X, np.arange(4.0))), [1.0, 1.0], atol=1e-12)


def test_vif_near_duplicate():
    rng = np.random.default_rng(0)
    a = rng.standard_normal(50)
    X = np.column_stack([np.ones(50), a, a + 1e-6 * rng.standard_normal(50)])
    assert np.all(vif(_ds(X, rng.standard_normal(50))) > 100)


def test_vif_exact_duplicate_is_infinite():
    rng = np.random.default_rng(0)
    a = rng.standard_normal(20)
    X = np.column_stack([np.ones(20), a, a])
    assert np.all(np.isinf(vif(_ds(X, rng.standard_normal(20)))))


def test_vif_matches_auxiliary_regressions():
    ds = random_dataset(60, 5, 21)
    np.testing.assert_allclose(vif(ds), aux_vif(ds.X), rtol=1e-8)


def test_hat_matrix_properties():
    ds = random_dataset(25, 3, 1)
    H = ols_hat_matrix(ds.X)
    np.testing.assert_allclose(H @ H, H, atol=1e-12)
    assert np.trace(H) == pytest.approx(4.0, abs=1e-10)
    assert fit_olr(ds).hat_trace == pytest.approx(4.0, abs=1e-10)


def test_json(tmp_path):
    m = fit_olr(random_dataset(20, 2, 3))
    m.to_json(tmp_path / "o.json")
    d = json.loads((tmp_path / "o.json").read_text())
    assert d["names"] == ["intercept", "v1", "v2"]
    assert d["beta"] == m.beta_hat.tolist()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(8, 60), st.integers(1, 4))
def test_sigma2_permutation_invariant(seed, n, p):
    ds = random_dataset(n, p, seed)
    perm = np.random.default_rng(seed + 1).permutation(n)
    a = fit_olr(ds, with_tests=False).sigma2_hat
    b = fit_olr(ds.subset(perm), with_tests=False).sigma2_hat
    assert b == pytest.approx(a, rel=1e-10)
