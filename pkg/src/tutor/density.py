"""Joint density models over encoded tabular data: MND, GMM (EM) and Gaussian KDE.

Hyperparameters (covariance shape and component count for the mixture,
bandwidth for the KDE) are chosen by exhaustive search on the summed
log-density of a held-out validation matrix.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .errors import CholeskyFailure, DimensionMismatch

LOG_2PI = math.log(2.0 * math.pi)
SHAPES = ("full", "diag", "spherical", "tied")
DEFAULT_RIDGE = 1e-6
MAX_RIDGE = 1e-2
DEFAULT_BANDWIDTHS = tuple(np.geomspace(0.05, 2.0, 15).tolist())
DEFAULT_COMPONENTS = tuple(range(1, 31))


def _values(m):
    return np.asarray(getattr(m, "values", m), dtype=float)


def _check_dim(model, X):
    if X.ndim != 2 or X.shape[1] != model.dim:
        raise DimensionMismatch(f"model has {model.dim} columns, data has shape {X.shape}")


def _cholesky(cov, ridge):
    """Cholesky of cov + ridge*I, escalating the ridge x10 up to MAX_RIDGE."""
    d = cov.shape[0]
    r = ridge
    while True:
        try:
            return np.linalg.cholesky(cov + r * np.eye(d)), r
        except np.linalg.LinAlgError:
            if r >= MAX_RIDGE:
                raise CholeskyFailure(f"covariance is singular even with ridge {r:g}") from None
            r = min(max(r, 1e-12) * 10.0, MAX_RIDGE)


def _gauss_logpdf_chol(X, mean, L):
    z = solve_triangular(L, (X - mean).T, lower=True)
    d = X.shape[1]
    return -0.5 * (d * LOG_2PI + np.sum(z * z, axis=0)) - np.sum(np.log(np.diag(L)))


# ---------------------------------------------------------------- MND


@dataclass(frozen=True)
class MndModel:
    mean: np.ndarray
    covariance: np.ndarray
    cholesky_factor: np.ndarray
    diagonal: bool = False
    ridge: float = DEFAULT_RIDGE
    fitted_on: tuple = (0, 0)
    method: str = field(default="mnd", init=False)

    @property
    def dim(self):
        return self.mean.shape[0]

    def log_density(self, X):
        X = _values(X)
        _check_dim(self, X)
        return _gauss_logpdf_chol(X, self.mean, self.cholesky_factor)

    def sample(self, count, seed):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((count, self.dim))
        return self.mean + z @ self.cholesky_factor.T

    def to_dict(self):
        return {
            "method": "mnd",
            "mean": self.mean.tolist(),
            "covariance": self.covariance.tolist(),
            "diagonal": self.diagonal,
            "ridge": self.ridge,
            "fitted_on": list(self.fitted_on),
        }

    @classmethod
    def from_dict(cls, d):
        cov = np.array(d["covariance"], dtype=float)
        L, r = _cholesky(cov, d["ridge"])
        return cls(np.array(d["mean"], dtype=float), cov, L, d["diagonal"], r, tuple(d["fitted_on"]))


def fit_mnd(train, diagonal: bool = False, ridge: float = DEFAULT_RIDGE) -> MndModel:
    X = _values(train)
    n = X.shape[0]
    if n < 2:
        raise ValueError("MND needs at least 2 rows")
    mu = X.mean(axis=0)
    D = X - mu
    cov = D.T @ D / n  # maximum-likelihood estimate: divide by N
    cov = 0.5 * (cov + cov.T)
    if diagonal:
        cov = np.diag(np.diag(cov))
    L, r = _cholesky(cov, ridge)
    return MndModel(mu, cov, L, diagonal, r, X.shape)


# ---------------------------------------------------------------- GMM


@dataclass(frozen=True)
class GmmModel:
    """Mixture of Gaussians.

    `covariances` is stored in the shape's natural form: (C, d, d) for full,
    (C, d) for diag, (C,) for spherical and (d, d) for tied. The ridge is
    already included.
    """

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    covariance_shape: str = "full"
    ridge: float = DEFAULT_RIDGE
    log_likelihood_trace: tuple = ()
    fitted_on: tuple = (0, 0)
    selection: tuple = ()  # ((C, shape, validation score), ...) over the searched grid
    method: str = field(default="gmm", init=False)

    @property
    def n_components(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def full_covariances(self):
        C, d = self.means.shape
        s = self.covariance_shape
        if s == "full":
            return self.covariances
        if s == "tied":
            return np.repeat(self.covariances[None], C, axis=0)
        if s == "diag":
            return np.stack([np.diag(v) for v in self.covariances])
        return np.stack([np.eye(d) * v for v in self.covariances])

    def component_log_density(self, X):
        """(n, C) matrix of log N(x | mu_c, Sigma_c)."""
        X = _values(X)
        _check_dim(self, X)
        return _component_logpdf(X, self.means, self.covariances, self.covariance_shape)

    def log_density(self, X):
        lp = self.component_log_density(X) + np.log(self.weights)
        return logsumexp(lp, axis=1)

    def sample(self, count, seed):
        rng = np.random.default_rng(seed)
        comp = rng.choice(self.n_components, size=count, p=self.weights)
        z = rng.standard_normal((count, self.dim))
        out = np.empty((count, self.dim))
        covs = self.full_covariances()
        for c in range(self.n_components):
            sel = comp == c
            if sel.any():
                L = np.linalg.cholesky(covs[c])
                out[sel] = self.means[c] + z[sel] @ L.T
        return out

    def n_parameters(self):
        C, d = self.means.shape
        cov_params = {
            "full": C * d * (d + 1) // 2,
            "diag": C * d,
            "spherical": C,
            "tied": d * (d + 1) // 2,
        }[self.covariance_shape]
        return C * d + cov_params + (C - 1)

    def to_dict(self):
        return {
            "method": "gmm",
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "covariance_shape": self.covariance_shape,
            "ridge": self.ridge,
            "log_likelihood_trace": list(self.log_likelihood_trace),
            "fitted_on": list(self.fitted_on),
            "selection": [list(s) for s in self.selection],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.array(d["weights"], dtype=float),
            np.array(d["means"], dtype=float),
            np.array(d["covariances"], dtype=float),
            d["covariance_shape"],
            d["ridge"],
            tuple(d["log_likelihood_trace"]),
            tuple(d["fitted_on"]),
            tuple(tuple(s) for s in d.get("selection", ())),
        )


def _component_logpdf(X, means, covs, shape):
    n, d = X.shape
    C = means.shape[0]
    out = np.empty((n, C))
    if shape == "full":
        for c in range(C):
            out[:, c] = _gauss_logpdf_chol(X, means[c], np.linalg.cholesky(covs[c]))
    elif shape == "tied":
        L = np.linalg.cholesky(covs)
        for c in range(C):
            out[:, c] = _gauss_logpdf_chol(X, means[c], L)
    elif shape == "diag":
        for c in range(C):
            v = covs[c]
            out[:, c] = -0.5 * (d * LOG_2PI + np.sum(np.log(v)) + np.sum((X - means[c]) ** 2 / v, axis=1))
    else:
        sq = (X * X).sum(1)[:, None] - 2 * X @ means.T + (means * means).sum(1)[None, :]
        sq = np.maximum(sq, 0.0)
        out[:] = -0.5 * (d * LOG_2PI + d * np.log(covs)[None, :] + sq / covs[None, :])
    return out


def _m_step(X, resp, shape, ridge, floor=False):
    """Weights, means and covariances from responsibilities.

    floor=False adds `ridge` to every covariance (the same regularisation as
    the MND fit). floor=True clips eigenvalues/variances at `ridge` instead,
    which is the exact maximiser of the EM objective over covariances with
    eigenvalues >= ridge and therefore never lowers the log-likelihood.
    """
    n, d = X.shape
    nk = resp.sum(axis=0)
    weights = nk / n
    means = (resp.T @ X) / nk[:, None]
    C = means.shape[0]
    reg = _floor_full if floor else _ridge_full
    if shape == "full":
        covs = np.empty((C, d, d))
        for c in range(C):
            D = X - means[c]
            S = (resp[:, c, None] * D).T @ D / nk[c]
            covs[c] = 0.5 * (S + S.T)
        covs = reg(covs, ridge)
    elif shape == "tied":
        S = X.T @ X - (nk[:, None] * means).T @ means
        S = 0.5 * (S + S.T) / n
        covs = reg(S[None], ridge)[0]
    else:
        var = np.maximum(resp.T @ (X * X) / nk[:, None] - means**2, 0.0)
        if shape == "spherical":
            var = var.mean(axis=1)
        covs = np.maximum(var, ridge) if floor else var + ridge
    return weights, means, covs


def _ridge_full(covs, ridge):
    out = np.empty_like(covs)
    for c in range(covs.shape[0]):
        _, r = _cholesky(covs[c], ridge)
        out[c] = covs[c] + r * np.eye(covs.shape[1])
    return out


def _floor_full(covs, ridge):
    out = np.empty_like(covs)
    for c in range(covs.shape[0]):
        evals, evecs = np.linalg.eigh(covs[c])
        S = (evecs * np.maximum(evals, ridge)) @ evecs.T
        out[c] = 0.5 * (S + S.T)
    return out


def _kmeanspp(X, C, rng):
    n = X.shape[0]
    centers = [int(rng.integers(n))]
    d2 = ((X - X[centers[0]]) ** 2).sum(1)
    for _ in range(1, C):
        total = d2.sum()
        if total <= 0:
            nxt = int(rng.integers(n))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        centers.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(1))
    return X[centers].copy()


def _em(X, C, shape, rng, ridge, max_iter, tol):
    n, d = X.shape
    centers = _kmeanspp(X, C, rng)
    d2 = (X * X).sum(1)[:, None] - 2 * X @ centers.T + (centers * centers).sum(1)[None, :]
    resp = np.zeros((n, C))
    resp[np.arange(n), np.argmin(d2, axis=1)] = 1.0
    # floor keeps every component alive at initialisation
    resp = resp + 1e-10
    resp /= resp.sum(1, keepdims=True)
    params = _m_step(X, resp, shape, ridge)
    prev = None  # (params, resp, ll) of the last accepted iterate
    trace = []
    for _ in range(max_iter):
        lp = _component_logpdf(X, params[1], params[2], shape) + np.log(params[0])
        row_ll = logsumexp(lp, axis=1)
        ll = float(row_ll.sum())
        if prev is not None and ll < prev[2]:
            # ridge-added step went downhill: redo it with the eigenvalue floor
            params = _m_step(X, prev[1], shape, ridge, floor=True)
            lp = _component_logpdf(X, params[1], params[2], shape) + np.log(params[0])
            row_ll = logsumexp(lp, axis=1)
            ll = float(row_ll.sum())
        if trace and ll - trace[-1] < tol:
            if ll >= trace[-1]:
                trace.append(ll)
            else:
                params = prev[0]
            break
        trace.append(ll)
        resp = np.exp(lp - row_ll[:, None])
        empty = resp.sum(0) < 1e-8
        if empty.any():
            # reseed each empty component at the currently worst-explained row
            worst = np.argsort(row_ll)[: int(empty.sum())]
            for c, r in zip(np.flatnonzero(empty), worst):
                resp[r] = 0.0
                resp[r, c] = 1.0
            trace = []  # a reseed restarts the monotone EM sequence
            prev = None
        else:
            prev = (params, resp, ll)
        params = _m_step(X, resp, shape, ridge)
    weights, means, covs = params
    return GmmModel(weights, means, covs, shape, ridge, tuple(trace), X.shape)


def _seed_for(seed, *parts):
    return np.random.default_rng([int(seed)] + [int(p) for p in parts])


def fit_gmm_single(train, C, shape="full", seed=0, max_iter=200, tol=1e-6, ridge=DEFAULT_RIDGE, restart=0):
    X = _values(train)
    rng = _seed_for(seed, C, SHAPES.index(shape), restart)
    return _em(X, C, shape, rng, ridge, max_iter, tol)


def fit_gmm(
    train,
    validation,
    c_range: Sequence[int] = DEFAULT_COMPONENTS,
    shapes: Sequence[str] = SHAPES,
    seed: int = 0,
    max_iter: int = 200,
    tol: float = 1e-6,
    restarts: int = 3,
    ridge: float = DEFAULT_RIDGE,
) -> GmmModel:
    """Grid search over (C, shape); best validation score wins.

    Each grid point runs `restarts` EM fits and keeps the one with the highest
    train log-likelihood, so validation data only ranks (C, shape).
    """
    X, V = _values(train), _values(validation)
    c_range = [c for c in c_range]
    if not c_range:
        raise ValueError("c_range must be nonempty")
    if max(c_range) > X.shape[0]:
        raise ValueError("component count exceeds training rows")
    best, best_score, table = None, -np.inf, []
    for C, shape in itertools.product(c_range, shapes):
        cand_best, cand_fit = None, -np.inf
        for r in range(restarts):
            try:
                m = fit_gmm_single(X, C, shape, seed, max_iter, tol, ridge, r)
                fit = float(m.log_density(X).sum())
            except (CholeskyFailure, np.linalg.LinAlgError):
                continue
            if np.isfinite(fit) and fit > cand_fit:
                cand_best, cand_fit = m, fit
        cand_score = -np.inf
        if cand_best is not None:
            try:
                cand_score = float(cand_best.log_density(V).sum())
            except (CholeskyFailure, np.linalg.LinAlgError):
                cand_best = None
            if not np.isfinite(cand_score):
                cand_best, cand_score = None, -np.inf
        table.append((C, shape, cand_score))
        if cand_best is not None and cand_score > best_score:
            best, best_score = cand_best, cand_score
    if best is None:
        raise CholeskyFailure("no GMM candidate could be fitted")
    return GmmModel(
        best.weights, best.means, best.covariances, best.covariance_shape, best.ridge,
        best.log_likelihood_trace, best.fitted_on, tuple(table),
    )


def aic(model: GmmModel, train) -> float:
    ll = float(model.log_density(_values(train)).sum())
    return 2.0 * model.n_parameters() - 2.0 * ll


# ---------------------------------------------------------------- KDE


@dataclass(frozen=True)
class KdeModel:
    support_points: np.ndarray
    bandwidth: float
    selection: tuple = ()  # ((h, validation score), ...)
    method: str = field(default="kde", init=False)

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if self.support_points.shape[0] == 0:
            raise ValueError("KDE needs at least one support point")

    @property
    def dim(self):
        return self.support_points.shape[1]

    @property
    def fitted_on(self):
        return self.support_points.shape

    def log_density(self, X, chunk=2048):
        X = _values(X)
        _check_dim(self, X)
        P = self.support_points
        n, d = P.shape
        h2 = self.bandwidth**2
        p2 = (P * P).sum(1)
        const = -math.log(n) - 0.5 * d * (LOG_2PI + math.log(h2))
        out = np.empty(X.shape[0])
        for s in range(0, X.shape[0], chunk):
            Y = X[s:s + chunk]
            sq = (Y * Y).sum(1)[:, None] - 2.0 * Y @ P.T + p2[None, :]
            out[s:s + chunk] = logsumexp(-0.5 * np.maximum(sq, 0.0) / h2, axis=1) + const
        return out

    def sample(self, count, seed):
        rng = np.random.default_rng(seed)
        idx = rng.integers(self.support_points.shape[0], size=count)
        return self.support_points[idx] + self.bandwidth * rng.standard_normal((count, self.dim))

    def to_dict(self):
        return {
            "method": "kde",
            "support_points": self.support_points.tolist(),
            "bandwidth": self.bandwidth,
            "selection": [list(s) for s in self.selection],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.array(d["support_points"], dtype=float),
            float(d["bandwidth"]),
            tuple(tuple(s) for s in d.get("selection", ())),
        )


def fit_kde(train, validation, bandwidth_grid: Sequence[float] = DEFAULT_BANDWIDTHS) -> KdeModel:
    X, V = _values(train), _values(validation)
    grid = sorted(float(h) for h in bandwidth_grid)
    if not grid or grid[0] <= 0:
        raise ValueError("bandwidth grid must be nonempty and positive")
    best_h, best_s, table = None, -np.inf, []
    for h in grid:
        s = float(KdeModel(X, h).log_density(V).sum())
        table.append((h, s))
        if best_h is None or s > best_s:  # ascending grid, strict '>' keeps the smaller h on ties
            best_h, best_s = h, s
    return KdeModel(X.copy(), best_h, tuple(table))


# ---------------------------------------------------------------- dispatch

DensityModel = Union[MndModel, GmmModel, KdeModel]
_CLASSES = {"mnd": MndModel, "gmm": GmmModel, "kde": KdeModel}


def score(model: DensityModel, data) -> float:
    """Sum of per-row log densities."""
    return float(np.sum(model.log_density(_values(data))))


def sample(model: DensityModel, count: int, seed: int) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be >= 1")
    return model.sample(count, seed)


def model_to_json(model: DensityModel, schema_fingerprint: str = "") -> str:
    d = model.to_dict()
    d["schema_fingerprint"] = schema_fingerprint
    return json.dumps(d, sort_keys=True)


def model_from_json(text: str) -> DensityModel:
    d = json.loads(text)
    return _CLASSES[d["method"]].from_dict(d)
