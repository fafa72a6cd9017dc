import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regimecast import gmm
from regimecast.classify import fit_scaler
from regimecast.errors import DomainError, FitError, InsufficientDataError

FAST = gmm.EMConfig(n_init=3)


def gaussian_logpdf(X, mean, cov):
    """Multivariate normal log density, from the textbook formula."""
    d = X.shape[1]
    diff = X - mean
    inv = np.linalg.inv(cov)
    _, logdet = np.linalg.slogdet(cov)
    maha = np.einsum("ij,jk,ik->i", diff, inv, diff)
    return -0.5 * (d * math.log(2 * math.pi) + logdet + maha)


def blobs(centers, n_per, sigma=1.0, seed=0):
    rng = np.random.default_rng(seed)
    centers = np.asarray(centers, dtype=float)
    X = np.vstack([c + sigma * rng.standard_normal((n_per, centers.shape[1]))
                   for c in centers])
    return X[rng.permutation(len(X))]


def test_single_component_closed_form():
    X = np.random.default_rng(1).normal(size=(200, 3)) @ np.diag([1.0, 2.0, 0.5])
    a = gmm.em_fit(X, 1, seed=0, config=FAST)
    b = gmm.em_fit(X, 1, seed=99, config=FAST)
    mu = X.mean(axis=0)
    cov = (X - mu).T @ (X - mu) / len(X) + 1e-6 * np.eye(3)
    np.testing.assert_allclose(a.means[0], mu, atol=1e-12)
    np.testing.assert_allclose(a.covariances[0], cov, atol=1e-12)
    np.testing.assert_allclose(b.covariances[0], a.covariances[0], atol=1e-12)
    assert a.weights.tolist() == [1.0]


def test_duplicated_data_same_single_fit():
    X = np.random.default_rng(2).normal(size=(50, 2))
    a = gmm.em_fit(X, 1, config=FAST)
    b = gmm.em_fit(np.vstack([X, X]), 1, config=FAST)
    np.testing.assert_allclose(a.means, b.means, atol=1e-12)
    np.testing.assert_allclose(a.covariances, b.covariances, atol=1e-12)


def test_single_component_loglik_and_bic_match_oracle():
    X = np.random.default_rng(3).normal(size=(300, 4))
    fit = gmm.em_fit(X, 1, config=FAST)
    logl = float(np.sum(gaussian_logpdf(X, fit.means[0], fit.covariances[0])))
    assert fit.log_likelihood == pytest.approx(logl, abs=1e-6)
    p = 4 + 4 * 5 // 2
    assert fit.bic == pytest.approx(-2 * logl + p * math.log(300), abs=1e-6)


def test_two_blobs_recovered():
    true = np.array([[0.0, 0.0], [10.0, 0.0]])
    X = blobs(true, 300, seed=4)
    fit = gmm.em_fit(X, 2, seed=0)
    order = np.argsort(fit.means[:, 0])
    np.testing.assert_allclose(fit.means[order], true, atol=0.1)   # 0.1 sigma
    np.testing.assert_allclose(fit.weights, [0.5, 0.5], atol=0.05)


def test_bic_arithmetic():
    fit = gmm.GmmFit(np.ones(1), np.zeros((1, 1)), np.ones((1, 1, 1)), -150.0, 0.0,
                     np.ones((100, 1)), 1, True, 0)
    assert gmm.bic(fit, 100) == pytest.approx(300 + 2 * math.log(100))
    assert gmm.bic(fit, 100) == pytest.approx(309.2103, abs=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e4, -1), st.floats(0, 100), st.integers(1, 9), st.integers(1, 8),
       st.integers(10, 10_000))
def test_bic_linear_and_penalised(logl, delta, K, d, n):
    def make(ll, k):
        return gmm.GmmFit(np.full(k, 1 / k), np.zeros((k, d)), np.zeros((k, d, d)), ll,
                          0.0, np.zeros((0, k)), 0, True, 0)
    base = gmm.bic(make(logl, K), n)
    assert gmm.bic(make(logl + delta, K), n) == pytest.approx(base - 2 * delta, abs=1e-6)
    assert gmm.bic(make(logl, K + 1), n) > base


def test_n_parameters():
    assert gmm.n_parameters(1, 1) == 2
    assert gmm.n_parameters(3, 8) == 2 + 24 + 108


def test_fit_invariants():
    X = blobs([[0, 0, 0], [6, 6, 0], [0, 6, 6]], 80, seed=5)
    fit = gmm.em_fit(X, 3, seed=1, config=FAST)
    assert fit.weights.sum() == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(fit.responsibilities.sum(axis=1), 1.0, atol=1e-9)
    for c in fit.covariances:
        np.testing.assert_allclose(c, c.T, atol=0)
        assert np.all(np.linalg.eigvalsh(c) > 0)
    h = np.array(fit.logl_history)
    assert np.all(np.diff(h) >= -1e-8)


def mixture_logl(X, fit):
    lp = np.stack([math.log(w) + gaussian_logpdf(X, m, c)
                   for w, m, c in zip(fit.weights, fit.means, fit.covariances)], axis=1)
    top = lp.max(axis=1)
    return float(np.sum(top + np.log(np.exp(lp - top[:, None]).sum(axis=1))))


def test_far_outlier_uses_exact_densities(monkeypatch):
    # one point among thousands sits about sqrt(n) deviations out whatever
    # the fitted covariance, so its shifted density underflows
    X = np.vstack([blobs([[0, 0]], 3000, seed=11), [[1e4, 0.0]]])
    calls = []
    direct = gmm._direct_log_prob
    monkeypatch.setattr(gmm, "_direct_log_prob", lambda *a: calls.append(1) or direct(*a))
    fit = gmm.em_fit(X, 1, seed=0, config=FAST)
    assert calls, "the outlier should underflow the shifted densities"
    assert fit.log_likelihood == pytest.approx(mixture_logl(X, fit), rel=1e-10)
    assert np.all(np.isfinite(fit.responsibilities))
    np.testing.assert_allclose(fit.responsibilities.sum(axis=1), 1.0, atol=1e-12)


def test_reported_logl_matches_direct_formula():
    X = blobs([[0, 0, 0], [6, 6, 0], [0, 6, 6]], 80, seed=5)
    fit = gmm.em_fit(X, 3, seed=2, config=FAST)
    assert fit.log_likelihood == pytest.approx(mixture_logl(X, fit), rel=1e-10)


def test_select_keeps_every_restart_trace():
    X = blobs([[0, 0], [8, 8]], 60, seed=8)
    fit = gmm.select_k(X, range(1, 4), seed=1, config=FAST)
    assert sorted(fit.candidates) == [1, 2, 3]
    for cand in fit.candidates.values():
        assert len(cand.restart_histories) == FAST.n_init
        assert cand.logl_history in cand.restart_histories
        for h in cand.restart_histories:
            assert np.all(np.diff(h) >= -1e-8)


def test_select_single_blob():
    X = np.random.default_rng(6).normal(size=(400, 2))
    assert gmm.select_k(X, range(1, 5), seed=0, config=FAST).K == 1


def test_select_three_blobs():
    X = blobs(10 * np.eye(3)[:, :2] * [1, 1], 150, seed=7)
    fit = gmm.select_k(X, range(1, 6), seed=0, config=FAST)
    assert fit.K == 3
    assert sorted(fit.bic_curve) == [1, 2, 3, 4, 5]
    assert fit.bic == min(fit.bic_curve.values())


def test_select_singleton_range_is_em_fit():
    X = blobs([[0, 0], [8, 8]], 60, seed=8)
    a = gmm.select_k(X, [2], seed=3, config=FAST)
    b = gmm.em_fit(X, 2, seed=3, config=FAST)
    assert a.log_likelihood == b.log_likelihood
    np.testing.assert_array_equal(a.means, b.means)


def test_select_skips_infeasible_k():
    X = np.random.default_rng(9).normal(size=(20, 3))
    fit = gmm.select_k(X, range(1, 8), config=FAST)
    assert fit.bic_curve[6] is None and fit.bic_curve[5] is not None


def test_select_all_fail():
    X = np.random.default_rng(9).normal(size=(10, 3))
    with pytest.raises(FitError) as exc:
        gmm.select_k(X, [5, 6], config=FAST)
    assert set(exc.value.diagnostics) == {5, 6}


def test_errors():
    with pytest.raises(InsufficientDataError):
        gmm.em_fit(np.zeros((5, 2)), 2)
    X = np.random.default_rng(0).normal(size=(30, 2))
    X[4, 1] = np.nan
    with pytest.raises(DomainError):
        gmm.em_fit(X, 1)
    fit = gmm.em_fit(np.random.default_rng(0).normal(size=(30, 2)), 1, config=FAST)
    with pytest.raises(DomainError):
        gmm.assign_and_filter(fit, np.zeros((3, 3)))


def test_same_seed_same_fit():
    X = blobs([[0, 0], [5, 5]], 60, seed=10)
    a = gmm.em_fit(X, 2, seed=4, config=FAST)
    b = gmm.em_fit(X, 2, seed=4, config=FAST)
    assert a.means.tobytes() == b.means.tobytes()
    assert a.logl_history == b.logl_history


@settings(max_examples=20, deadline=None)
@given(st.floats(0.1, 50), st.integers(0, 1000))
def test_scale_equivariance_single_component(c, seed):
    X = np.random.default_rng(seed).normal(size=(40, 2))
    a = gmm.em_fit(X, 1, config=FAST)
    b = gmm.em_fit(c * X, 1, config=FAST)
    ridge = 1e-6 * np.eye(2)
    np.testing.assert_allclose(b.means, c * a.means, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(b.covariances[0] - ridge, c ** 2 * (a.covariances[0] - ridge),
                               rtol=1e-8, atol=1e-10)


def test_label_permutation_equivalence():
    X = blobs([[0, 0], [6, 0], [0, 6]], 50, seed=11)
    fit = gmm.em_fit(X, 3, seed=0, config=FAST)
    perm = np.array([2, 0, 1])
    swapped = gmm.GmmFit(fit.weights[perm], fit.means[perm], fit.covariances[perm],
                         fit.log_likelihood, fit.bic, fit.responsibilities[:, perm], 0, True, 0)
    assert swapped.score(X) == pytest.approx(fit.score(X), rel=1e-12)
    a = gmm.assign_and_filter(fit, X).labels
    b = gmm.assign_and_filter(swapped, X).labels
    np.testing.assert_array_equal(perm[b], a)


def _two_point_fit():
    return gmm.GmmFit(np.array([0.5, 0.5]), np.array([[-5.0], [5.0]]),
                      np.ones((2, 1, 1)), 0.0, 0.0, np.zeros((0, 2)), 0, True, 0)


def test_assignment_rules():
    fit = _two_point_fit()
    labels = gmm.assign_and_filter(fit, np.array([[-5.0], [5.0], [0.0]])).labels
    assert labels.tolist() == [0, 1, 0]   # the midpoint ties; lowest index wins


def test_single_component_assignment_keeps_order():
    X = np.random.default_rng(12).normal(size=(30, 2))
    fit = gmm.em_fit(X, 1, config=FAST)
    a = gmm.assign_and_filter(fit, X)
    assert a.labels.tolist() == [0] * 30
    assert a.members[0].tolist() == list(range(30))
    assert a.sizes == [30]


def test_cluster_profile_minmax_range():
    X = np.random.default_rng(13).normal(size=(60, 3))
    Xs = fit_scaler(X, "minmax").transform(X)
    fit = gmm.em_fit(Xs, 1, config=FAST)
    prof = gmm.cluster_profile(fit, Xs)
    assert prof.shape == (1, 3)
    assert np.all((prof >= 0) & (prof <= 1))
    np.testing.assert_allclose(prof[0], Xs.mean(axis=0))


def test_model_round_trip():
    X = blobs([[0, 0], [6, 6]], 40, seed=14)
    fit = gmm.select_k(X, range(1, 4), seed=2, config=FAST)
    back = gmm.fit_from_dict(gmm.fit_to_dict(fit))
    assert back.K == fit.K and back.bic_curve == fit.bic_curve
    np.testing.assert_array_equal(back.covariances, fit.covariances)
    np.testing.assert_array_equal(back.log_prob(X), fit.log_prob(X))
