import math

import numpy as np
import pytest

from gnnwr.diagnostics import aicc
from gnnwr.errors import BandwidthError, ConfigError, LocalFitError, SearchError
from gnnwr.geodata import distance_matrix
from gnnwr.gwr import (
    KernelSpec,
    fit_gwr,
    golden_search_bandwidth,
    golden_section_int,
    gwr_aicc,
    kernel_weight,
    predict_gwr,
    resolve_bandwidth,
)
from gnnwr.olr import fit_olr, predict_olr
from gnnwr.synthgen import FieldSpec, GeneratorSpec, generate

from conftest import random_dataset

BISQ = KernelSpec.fixed(10.0)
GAUSS = KernelSpec.fixed(10.0, "gaussian")


def test_kernel_values():
    assert kernel_weight(0.0, BISQ, 10.0) == 1.0
    assert kernel_weight(0.0, GAUSS, 10.0) == 1.0
    assert kernel_weight(10.0, BISQ, 10.0) == 0.0
    assert kernel_weight(25.0, BISQ, 10.0) == 0.0
    assert abs(kernel_weight(10.0, GAUSS, 10.0) - math.exp(-1)) < 1e-12
    assert kernel_weight(5.0, BISQ, 10.0) == pytest.approx(0.5625, abs=1e-15)


def test_unsquared_gaussian_switch():
    spec = KernelSpec.fixed(10.0, "gaussian", gaussian_unsquared=True)
    assert kernel_weight(4.0, spec, 10.0) == pytest.approx(math.exp(-4 / 100))


def test_fixed_bandwidth_ignores_distances():
    assert resolve_bandwidth(KernelSpec.fixed(500), [0.0, 3.0, 1e6]) == 500.0


def test_adaptive_bandwidth_skips_self():
    assert resolve_bandwidth(KernelSpec.adaptive(2), [0.0, 3.0, 7.0, 9.0]) == 7.0
    assert resolve_bandwidth(KernelSpec.adaptive(2), [5.0, 3.0, 7.0, 9.0]) == 5.0


def test_adaptive_tie_takes_tied_distance():
    assert resolve_bandwidth(KernelSpec.adaptive(2), [0.0, 4.0, 4.0, 4.0, 9.0]) == 4.0
    assert resolve_bandwidth(KernelSpec.adaptive(3), [0.0, 4.0, 4.0, 4.0, 9.0]) == 4.0


def test_adaptive_too_many_neighbors():
    with pytest.raises(BandwidthError):
        resolve_bandwidth(KernelSpec.adaptive(4), [0.0, 1.0, 2.0, 3.0])


def test_kernel_spec_validation():
    with pytest.raises(ConfigError):
        KernelSpec.fixed(-1.0)
    with pytest.raises(ConfigError):
        KernelSpec(family="tricube")
    with pytest.raises(ConfigError):
        fit_gwr(random_dataset(20, 3, 0), KernelSpec.adaptive(4))


def test_infinite_bandwidth_collapses_to_olr():
    ds = random_dataset(40, 3, 1)
    g = fit_gwr(ds, KernelSpec.fixed(1e12))
    b = fit_olr(ds, with_tests=False).beta_hat
    assert np.max(np.abs(g.local_beta - b)) < 1e-6


def test_constant_field_recovery():
    spec = GeneratorSpec(
        n=30, fields=(FieldSpec.const(1.0), FieldSpec.const(2.0), FieldSpec.const(-1.0)), noise_sd=0.1, seed=4
    )
    ds, beta = generate(spec)
    g = fit_gwr(ds, KernelSpec.fixed(30_000.0, "gaussian"))
    assert np.max(np.abs(g.local_beta - beta)) < 5 * 0.1


def test_hat_rows_reproduce_local_fits():
    ds = random_dataset(50, 2, 2)
    g = fit_gwr(ds, KernelSpec.adaptive(20))
    np.testing.assert_allclose(g.hat @ ds.y, g.fitted, atol=1e-10)
    D = distance_matrix(ds, ds)
    b = resolve_bandwidth(g.kernel, D)
    for i in (0, 17, 49):
        w = kernel_weight(D[i], g.kernel, b[i])
        sw = np.sqrt(w)
        beta_i = np.linalg.lstsq(sw[:, None] * ds.X, sw * ds.y, rcond=None)[0]
        assert ds.X[i] @ beta_i == pytest.approx(g.fitted[i], abs=1e-10)


def test_zero_weight_points_do_not_matter():
    ds = random_dataset(60, 2, 3)
    g = fit_gwr(ds, KernelSpec.adaptive(15))
    D = distance_matrix(ds, ds)
    for i in (0, 30):
        keep = D[i] < g.bandwidths[i]
        sub = ds.subset(np.flatnonzero(keep))
        w = kernel_weight(distance_matrix(ds.coords[i : i + 1], sub)[0], g.kernel, g.bandwidths[i])
        sw = np.sqrt(w)
        Q, R = np.linalg.qr(sw[:, None] * sub.X)
        local = np.linalg.solve(R, Q.T @ (sw * sub.y))
        assert np.max(np.abs(local - g.local_beta[i])) < 1e-12


def test_aicc_single_formula():
    ds = random_dataset(50, 2, 4)
    g = fit_gwr(ds, KernelSpec.adaptive(25))
    assert g.aicc == pytest.approx(aicc(ds.n, g.rss / ds.n, float(np.trace(g.hat))), abs=1e-10)
    assert gwr_aicc(ds, KernelSpec.adaptive(25)) == pytest.approx(g.aicc, abs=1e-9)


def test_scale_equivariance():
    from dataclasses import replace

    ds = random_dataset(40, 2, 5)
    a = fit_gwr(ds, KernelSpec.adaptive(18)).local_beta
    b = fit_gwr(replace(ds, y=ds.y * 3.5), KernelSpec.adaptive(18)).local_beta
    np.testing.assert_allclose(b, 3.5 * a, rtol=1e-12, atol=1e-13)


def test_tiny_bandwidth_is_rank_deficient():
    ds = random_dataset(30, 2, 6)
    with pytest.raises(LocalFitError):
        fit_gwr(ds, KernelSpec.fixed(1.0))


def test_golden_matches_exhaustive_scan():
    rng = np.random.default_rng(0)
    for trial in range(20):
        lo, hi = 10, int(rng.integers(12, 400))
        centre = rng.uniform(lo, hi)
        table = {m: (m - centre) ** 2 + 0.5 * abs(m - centre) for m in range(lo, hi + 1)}
        m, v, memo = golden_section_int(table.__getitem__, lo, hi)
        best = min(table, key=lambda k: (table[k], k))
        assert table[m] == table[best]
        assert len(memo) < (hi - lo + 1) or hi - lo < 8


def test_golden_degenerate_interval():
    assert golden_section_int(lambda m: 0.0, 7, 7)[0] == 7
    with pytest.raises(SearchError):
        golden_section_int(lambda m: 0.0, 8, 7)


def test_search_uses_injected_table():
    ds = random_dataset(60, 2, 0)
    m, v = golden_search_bandwidth(ds, "bisquare", 5, 59, aicc_fn=lambda m: abs(m - 33) + 1.0)
    assert (m, v) == (33, 1.0)
    with pytest.raises(SearchError):
        golden_search_bandwidth(ds, "bisquare", 3, 59)


def test_predict_at_training_location():
    ds = random_dataset(50, 2, 7)
    g = fit_gwr(ds, KernelSpec.adaptive(20))
    pred = predict_gwr(g, ds.coords[[3, 8]], ds.X[[3, 8]])
    np.testing.assert_allclose(pred, g.fitted[[3, 8]], atol=1e-10)


def test_predict_infinite_bandwidth_is_olr():
    ds = random_dataset(50, 2, 8)
    new = random_dataset(10, 2, 9)
    g = fit_gwr(ds, KernelSpec.fixed(1e12))
    olr = fit_olr(ds, with_tests=False)
    np.testing.assert_allclose(predict_gwr(g, new.coords, new.X), predict_olr(olr, new.X), atol=1e-6)


def test_predict_reports_singular_points():
    ds = random_dataset(50, 2, 8)
    g = fit_gwr(ds, KernelSpec.fixed(1e12))
    g.kernel = KernelSpec.fixed(1.0)
    y, errors = predict_gwr(g, np.array([[-1e7, -1e7]]), np.ones((1, 3)), return_errors=True)
    assert np.isnan(y[0]) and 0 in errors


def _varying(seed, n=200):
    L = 20_000.0
    fields = (FieldSpec.smooth(1.0, 2.0, L), FieldSpec.smooth(2.0, 2.5, L, (1.0, 0.2, 0.4)))
    return generate(GeneratorSpec(n=n, fields=fields, noise_sd=0.5, seed=seed))[0]


def test_gwr_beats_olr_on_varying_field():
    wins = 0
    for seed in range(10):
        ds = _varying(seed)
        train, test = ds.subset(np.arange(150)), ds.subset(np.arange(150, 200))
        m, _ = golden_search_bandwidth(train, "bisquare", 10, 149)
        g = fit_gwr(train, KernelSpec.adaptive(m))
        olr = fit_olr(train, with_tests=False)
        rmse_g = np.sqrt(np.mean((predict_gwr(g, test.coords, test.X) - test.y) ** 2))
        rmse_o = np.sqrt(np.mean((predict_olr(olr, test.X) - test.y) ** 2))
        wins += rmse_g < rmse_o
    assert wins >= 8
