"""Full-covariance Gaussian mixtures fitted by EM, with BIC model selection.

Used to split hourly observations into regimes: each hour goes to its
most responsible component and every component yields a temporally
ordered sub-series.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, FitError, InsufficientDataError

logger = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)
_EPS = 10 * np.finfo(np.float64).eps
# shifted mixture densities outside this range are recomputed exactly
_TINY, _HUGE = 1e-280, 1e280


@dataclass(frozen=True)
class EMConfig:
    tol: float = 1e-6
    max_iter: int = 500
    n_init: int = 10
    ridge: float = 1e-6


@dataclass
class GmmFit:
    weights: np.ndarray          # (K,)
    means: np.ndarray            # (K, d)
    covariances: np.ndarray      # (K, d, d), ridge included
    log_likelihood: float
    bic: float
    responsibilities: np.ndarray  # (n, K)
    n_iter: int
    converged: bool
    seed: int
    logl_history: list = field(default_factory=list)
    bic_curve: dict = field(default_factory=dict)
    # logL trace of every restart, in restart order (the kept one included)
    restart_histories: list = field(default_factory=list, repr=False, compare=False)
    # every fitted K from select_k, keyed by K
    candidates: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def K(self):
        return len(self.weights)

    @property
    def d(self):
        return self.means.shape[1]

    def log_prob(self, X):
        """Per-component joint log densities ``log w_k + log N(x | k)``."""
        X = _as_data(X)
        if X.shape[1] != self.d:
            raise DomainError(f"expected {self.d} features, got {X.shape[1]}")
        return _weighted_log_prob(X, self.weights, self.means, _cholesky(self.covariances))

    def predict_proba(self, X):
        lp = self.log_prob(X)
        return np.exp(lp - _logsumexp_rows(lp)[:, None])

    def score(self, X):
        """Total log-likelihood of ``X``."""
        return float(np.sum(_logsumexp_rows(self.log_prob(X))))


def n_parameters(K, d):
    return (K - 1) + K * d + K * d * (d + 1) // 2


def bic(fit: GmmFit, n) -> float:
    return -2.0 * fit.log_likelihood + n_parameters(fit.K, fit.d) * math.log(n)


def _as_data(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if not np.all(np.isfinite(X)):
        raise DomainError("non-finite value in GMM input")
    return X


def _cholesky(cov):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise FitError("covariance is not positive definite; increase the ridge") from None


def _logsumexp_rows(a):
    m = a.max(axis=1)
    return m + np.log(np.sum(np.exp(a - m[:, None]), axis=1))


class _Moments:
    """Per-dataset products reused by every EM iteration.

    Each row of ``Z`` holds the upper triangle of ``x x'``, then ``x``,
    then 1, so both E- and M-steps reduce to one matrix product.
    """

    def __init__(self, X):
        n, d = X.shape
        self.X, self.n, self.d = X, n, d
        self.iu = np.triu_indices(d)
        self.T = len(self.iu[0])
        Z = np.empty((n, self.T + d + 1))
        Z[:, :self.T] = X[:, self.iu[0]] * X[:, self.iu[1]]
        Z[:, self.T:self.T + d] = X
        Z[:, -1] = 1.0
        self.Z = Z
        self.Zt = np.ascontiguousarray(Z.T)
        self.offdiag_scale = np.where(self.iu[0] == self.iu[1], 1.0, 2.0)
        self.eye = np.eye(d)


def _density_coef(mom, weights, means, chol):
    """Coefficients turning the moment rows into ``log w_k + log N(x | k)``
    for ``M`` stacked components, plus each component's peak value.

    The Mahalanobis term is expanded as ``x'Px - 2 x'P mu + mu'P mu`` so
    the whole density is one product with the precomputed moments.
    """
    d, T = mom.d, mom.T
    linv = np.linalg.inv(chol)
    prec = np.matmul(linv.transpose(0, 2, 1), linv)            # (M, d, d)
    pm = np.matmul(prec, means[:, :, None])[:, :, 0]           # P_k mu_k
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    cap = logw - 0.5 * (d * _LOG_2PI + logdet)                 # value at x = mu
    coef = np.empty((len(weights), T + d + 1))
    coef[:, :T] = prec[:, mom.iu[0], mom.iu[1]] * (-0.5 * mom.offdiag_scale)
    coef[:, T:T + d] = pm
    coef[:, -1] = cap - 0.5 * (pm * means).sum(axis=1)
    return coef, cap


def _weighted_log_prob_t(mom, weights, means, chol):
    """``log w_k + log N(x_i | mu_k, Sigma_k)`` laid out as ``(M, n)``."""
    coef, cap = _density_coef(mom, weights, means, chol)
    out = coef @ mom.Zt
    # the quadratic form is non-negative; clamp rounding above the peak
    np.minimum(out, cap[:, None], out=out)
    return out


def _direct_log_prob(x, weights, means, chol):
    """Log densities of one point by explicit triangular solves; the exact
    fallback for the expanded form."""
    z = np.linalg.solve(chol, (x - means)[:, :, None])[:, :, 0]
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    return logw - 0.5 * (len(x) * _LOG_2PI + logdet + np.sum(z * z, axis=1))


def _weighted_log_prob(X, weights, means, chol):
    return _weighted_log_prob_t(_Moments(X), weights, means, chol).T


def _m_step(mom, resp_t, ridge):
    """M-step for ``M`` stacked components from ``(M, n)`` responsibilities.
    Returns unnormalized counts, means and ridged covariances."""
    return _params_from_sums(mom, _weighted_sums(mom, resp_t), ridge)


def _weighted_sums(mom, resp_t):
    """``resp_t @ Z`` computed as ``(Zt @ resp_t.T).T``, which BLAS runs
    noticeably faster for a wide ``resp_t``."""
    return (mom.Zt @ resp_t.T).T


def _params_from_sums(mom, S, ridge):
    """Turn responsibility-weighted sums of the moment rows into
    ``(counts, means, covariances)``."""
    d, T = mom.d, mom.T
    nk = S[:, -1] + _EPS
    S = S / nk[:, None]
    means = S[:, T:T + d].copy()
    second = np.empty((len(nk), d, d))
    second[:, mom.iu[0], mom.iu[1]] = S[:, :T]
    second[:, mom.iu[1], mom.iu[0]] = S[:, :T]
    cov = second - means[:, :, None] * means[:, None, :]
    cov += ridge * mom.eye
    return nk, means, cov


def _kmeanspp_centers(X, K, rng):
    n = len(X)
    centers = [int(rng.integers(n))]
    d2 = np.sum((X - X[centers[0]]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            nxt = int(rng.integers(n))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        centers.append(nxt)
        d2 = np.minimum(d2, np.sum((X - X[nxt]) ** 2, axis=1))
    return X[centers]


def _initial_resp(X, K, rng):
    """Hard assignment to the nearest k-means++ seed, as ``(K, n)``."""
    centers = _kmeanspp_centers(X, K, rng)
    d2 = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    resp = np.zeros((K, len(X)))
    resp[np.argmin(d2, axis=1), np.arange(len(X))] = 1.0
    return resp


class _Chains:
    """The EM chains of one component count ``K``, advanced in lockstep."""

    def __init__(self, K, seeds):
        self.K = K
        self.R = len(seeds)
        self.seeds = seeds
        self.active = np.arange(self.R)
        self.history = [[] for _ in seeds]
        self.n_iter = np.zeros(self.R, dtype=np.int64)
        self.results = [None] * self.R
        self.error = None

    def set_params(self, mom, nk, means, cov):
        K, d = self.K, mom.d
        self.weights = (nk / mom.n).reshape(-1, K)
        self.means = means.reshape(-1, K, d)
        self.cov = cov.reshape(-1, K, d, d)


def _run_chains(mom, jobs, cfg: EMConfig):
    """Run independent EM chains, one per ``(K, seed)`` pair in ``jobs``.

    Each chain has its own k-means++ start and its own convergence test
    and leaves the batch as soon as it stops; batching only shares the
    matrix products. A covariance that loses positive definiteness
    fails every chain of that ``K`` (recorded in ``group.error``).
    """
    n, d = mom.n, mom.d
    groups = [_Chains(K, seeds) for K, seeds in jobs]
    resp0 = np.concatenate([_initial_resp(mom.X, g.K, np.random.default_rng(s))
                            for g in groups for s in g.seeds])
    _scatter_params(mom, groups, _m_step(mom, resp0, cfg.ridge))
    while True:
        live = [g for g in groups if g.active.size and g.error is None]
        if not live:
            break
        chol = _group_cholesky(live, d)
        live = [g for g in live if g.error is None]
        if not live:
            break
        sizes = [g.active.size * g.K for g in live]
        weights = np.concatenate([g.weights.ravel() for g in live])
        means = np.concatenate([g.means.reshape(-1, d) for g in live])
        coef, cap = _density_coef(mom, weights, means, chol)
        # Shift every chain by its largest component peak, an upper bound
        # on its log densities, so the log-sum-exp needs no per-sample max;
        # the shift rides along in the constant column of the product.
        shift = np.concatenate([seg.reshape(-1, g.K).max(axis=1) for g, seg in
                                zip(live, np.split(cap, np.cumsum(sizes)[:-1]))])
        coef[:, -1] -= np.repeat(shift, np.concatenate([np.full(g.active.size, g.K)
                                                        for g in live]))
        lp = coef @ mom.Zt
        o, c, rows, kept = 0, 0, [], []
        with np.errstate(over="ignore", divide="ignore"):
            np.exp(lp, out=lp)
            for g in live:
                A, K = g.active.size, g.K
                block = lp[o:o + A * K].reshape(A, K, n)
                total = block.sum(axis=1)
                log_total = np.log(total)
                # samples far below every peak, or hit by rounding in the
                # expansion, are recomputed exactly
                for j, i in zip(*np.nonzero(~((total >= _TINY) & (total <= _HUGE)))):
                    seg = slice(o + j * K, o + (j + 1) * K)
                    exact = _direct_log_prob(mom.X[i], weights[seg], means[seg], chol[seg])
                    top = exact.max()
                    block[j, :, i] = np.exp(exact - top)
                    total[j, i] = block[j, :, i].sum()
                    log_total[j, i] = top + np.log(total[j, i]) - shift[c + j]
                block *= (1.0 / total)[:, None, :]
                logl = n * shift[c:c + A] + log_total.sum(axis=1)
                keep = []
                for j, r in enumerate(g.active):
                    h = g.history[r]
                    h.append(float(logl[j]))
                    # relative change: tol is scale-free in both n and the data units
                    converged = len(h) > 1 and abs(h[-1] - h[-2]) < cfg.tol * abs(h[-1])
                    if converged or g.n_iter[r] >= cfg.max_iter:
                        g.results[r] = (g.weights[j].copy(), g.means[j].copy(),
                                        g.cov[j].copy(), block[j].T.copy(), h[-1],
                                        int(g.n_iter[r]), converged, h)
                    else:
                        keep.append(j)
                keep = np.array(keep, dtype=np.int64)
                rows.append((o + keep[:, None] * K + np.arange(K)).ravel())
                g.active = g.active[keep]
                g.n_iter[g.active] += 1
                kept.append(g)
                o += A * K
                c += A
        rows = np.concatenate(rows)
        if not rows.size:
            break
        _scatter_params(mom, kept, _params_from_sums(mom, _weighted_sums(mom, lp)[rows],
                                                     cfg.ridge))
    return groups


def _scatter_params(mom, groups, params):
    """Hand consecutive slices of stacked ``(counts, means, covariances)``
    to each group's active chains."""
    nk, means, cov = params
    o = 0
    for g in groups:
        m = g.active.size * g.K
        if m:
            g.set_params(mom, nk[o:o + m], means[o:o + m], cov[o:o + m])
        o += m


def _group_cholesky(groups, d):
    """Stacked Cholesky factors of every group's covariances. A group whose
    factorization fails is marked with the error and left out."""
    covs = [g.cov.reshape(-1, d, d) for g in groups]
    try:
        return _cholesky(np.concatenate(covs))
    except FitError:
        pass
    chols = []
    for g, cov in zip(groups, covs):
        try:
            chols.append(_cholesky(cov))
        except FitError as exc:
            g.error = exc
    return np.concatenate(chols) if chols else np.empty((0, d, d))


def _best_fit(X, group, seed):
    if group.error is not None:
        raise group.error
    runs = group.results
    best = max(range(len(runs)), key=lambda r: (runs[r][4], -r))
    weights, means, cov, resp, logl, n_iter, converged, history = runs[best]
    fit = GmmFit(weights, means, cov, logl, float("nan"), resp, n_iter, converged,
                 seed, history, restart_histories=[run[7] for run in runs])
    fit.bic = bic(fit, len(X))
    return fit


def _check_size(n, d, K):
    if K < 1:
        raise ValueError("K must be positive")
    if n < K * (d + 1):
        raise InsufficientDataError(f"K={K} in {d} dimensions needs at least "
                                    f"{K * (d + 1)} observations, got {n}")


def em_fit(X, K, seed=0, config: EMConfig = EMConfig()) -> GmmFit:
    """Fit a ``K``-component mixture, keeping the best of ``config.n_init``
    k-means++-seeded restarts by final log-likelihood (ties to the earlier
    restart).

    Restart ``r`` draws from ``numpy.random.default_rng([seed, r])``.
    """
    X = _as_data(X)
    _check_size(*X.shape, K)
    seeds = [[seed, r] for r in range(config.n_init)]
    (group,) = _run_chains(_Moments(X), [(K, seeds)], config)
    return _best_fit(X, group, seed)


def select_k(X, k_range=range(1, 11), seed=0, config: EMConfig = EMConfig()) -> GmmFit:
    """Fit every ``K`` in ``k_range`` and return the lowest-BIC fit (ties to
    the smaller K). The full curve is attached as ``fit.bic_curve``;
    components that could not be fitted map to ``None``.

    Every ``K`` uses the same seeds as :func:`em_fit` would; the fits
    simply run side by side.
    """
    X = _as_data(X)
    n, d = X.shape
    ks = sorted(set(int(k) for k in k_range))
    if not ks:
        raise ValueError("k_range is empty")
    fits, failures, jobs = {}, {}, []
    for k in ks:
        try:
            _check_size(n, d, k)
            jobs.append((k, [[seed, r] for r in range(config.n_init)]))
        except InsufficientDataError as exc:
            failures[k] = str(exc)
    for group in (_run_chains(_Moments(X), jobs, config) if jobs else []):
        try:
            fits[group.K] = _best_fit(X, group, seed)
        except FitError as exc:
            failures[group.K] = str(exc)
    for k, why in sorted(failures.items()):
        logger.info("K=%d skipped: %s", k, why)
    if not fits:
        raise FitError("no mixture size could be fitted", failures)
    best_k = min(fits, key=lambda k: (fits[k].bic, k))
    best = fits[best_k]
    best.bic_curve = {k: (fits[k].bic if k in fits else None) for k in ks}
    best.candidates = fits
    return best


@dataclass
class ClusterAssignment:
    labels: np.ndarray            # (n,) component index per observation
    members: list                 # per component: observation indices, in order

    @property
    def sizes(self):
        return [len(m) for m in self.members]


def assign_and_filter(fit: GmmFit, X) -> ClusterAssignment:
    """Hard-assign each row to its most responsible component; ties go to
    the lowest index."""
    lp = fit.log_prob(X)
    labels = np.argmax(lp, axis=1)
    members = [np.flatnonzero(labels == k) for k in range(fit.K)]
    return ClusterAssignment(labels, members)


def cluster_profile(fit: GmmFit, X_scaled, labels=None):
    """Per-cluster mean of the (already standardised) features, shape
    ``(K, d)``; empty clusters give NaN rows."""
    X_scaled = _as_data(X_scaled)
    if labels is None:
        labels = assign_and_filter(fit, X_scaled).labels
    out = np.full((fit.K, X_scaled.shape[1]), np.nan)
    for k in range(fit.K):
        rows = X_scaled[labels == k]
        if len(rows):
            out[k] = rows.mean(axis=0)
    return out


def fit_to_dict(fit: GmmFit) -> dict:
    return {
        "K": fit.K,
        "d": fit.d,
        "weights": fit.weights.tolist(),
        "means": fit.means.tolist(),
        "covariances": [c.ravel().tolist() for c in fit.covariances],
        "log_likelihood": fit.log_likelihood,
        "bic": fit.bic,
        "n_iter": fit.n_iter,
        "converged": fit.converged,
        "seed": fit.seed,
        "bic_curve": [[k, v] for k, v in sorted(fit.bic_curve.items())],
    }


def fit_from_dict(doc) -> GmmFit:
    K, d = doc["K"], doc["d"]
    cov = np.array(doc["covariances"], dtype=np.float64).reshape(K, d, d)
    return GmmFit(
        weights=np.array(doc["weights"], dtype=np.float64),
        means=np.array(doc["means"], dtype=np.float64).reshape(K, d),
        covariances=cov,
        log_likelihood=doc["log_likelihood"],
        bic=doc["bic"],
        responsibilities=np.empty((0, K)),
        n_iter=doc["n_iter"],
        converged=doc["converged"],
        seed=doc["seed"],
        bic_curve={int(k): v for k, v in doc["bic_curve"]},
    )
