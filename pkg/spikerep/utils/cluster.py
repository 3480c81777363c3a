"""Gaussian mixture clustering by EM, and PCA."""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.special import logsumexp
from sklearn.decomposition import PCA

from spikerep.utils.errors import PipelineError
from spikerep.utils.seeding import substream

logger = logging.getLogger(__name__)

MONOTONE_TOL = 1e-8


@dataclass(frozen=True)
class GmmOptions:
    max_iter: int = 100
    tol: float = 1e-3
    reg: float = 1e-6
    n_init: int = 1


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    converged: bool = True
    log_likelihood: float = float("nan")
    n_iter: int = 0
    history: List[float] = field(default_factory=list)

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        if weights.ndim != 1 or np.any(weights < 0) or not weights.sum() > 0:
            raise PipelineError("Mixture weights must be nonnegative and not all zero", "invalid_model", {})
        self.weights = weights / weights.sum()
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covariances = np.asarray(self.covariances, dtype=np.float64)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def n_features(self) -> int:
        return self.means.shape[1]

    def n_parameters(self) -> int:
        k, d = self.n_components, self.n_features
        return (k - 1) + k * d + k * d * (d + 1) // 2


def _check_data(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] < 1:
        raise PipelineError("Expected an N×D data matrix", "degenerate_input", {"shape": list(X.shape)})
    if not np.all(np.isfinite(X)):
        raise PipelineError("Data contains non-finite values", "non_finite", {})
    return X


def _squared_distances(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)


def _inverse_cdf(weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    cumulative = np.cumsum(weights)
    idx = np.searchsorted(cumulative, u * cumulative[-1], side="right")
    return np.minimum(idx, len(weights) - 1)


def kmeans_plus_plus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++ seeding with 2 + ⌊ln k⌋ local trials per center."""
    n = len(X)
    n_trials = 2 + int(math.log(k))
    first = int(_inverse_cdf(np.ones(n), rng.random(1))[0])
    centers = [X[first]]
    potential = _squared_distances(X, X[first][None, :])[:, 0]
    for _ in range(1, k):
        u = rng.random(n_trials)
        if potential.sum() > 0:
            candidates = _inverse_cdf(potential, u)
        else:
            candidates = _inverse_cdf(np.ones(n), u)
        cand_dist = np.minimum(potential[:, None], _squared_distances(X, X[candidates]))
        best = int(np.argmin(cand_dist.sum(axis=0)))
        centers.append(X[candidates[best]])
        potential = cand_dist[:, best]
    return np.array(centers)


def _m_step(X: np.ndarray, resp: np.ndarray, reg: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    nk = resp.sum(axis=0) + 10 * np.finfo(resp.dtype).eps
    means = resp.T @ X / nk[:, None]
    d = X.shape[1]
    covariances = np.empty((len(nk), d, d))
    for k in range(len(nk)):
        diff = X - means[k]
        covariances[k] = (resp[:, k] * diff.T) @ diff / nk[k]
        covariances[k].flat[:: d + 1] += reg
    return nk / nk.sum(), means, covariances


def _weighted_log_prob(X: np.ndarray, model: GmmModel) -> np.ndarray:
    n, d = X.shape
    out = np.empty((n, model.n_components))
    for k in range(model.n_components):
        try:
            chol = linalg.cholesky(model.covariances[k], lower=True)
        except linalg.LinAlgError as e:
            raise PipelineError(
                f"Covariance of component {k} is not positive definite", "degenerate_input", {"component": k}
            ) from e
        z = linalg.solve_triangular(chol, (X - model.means[k]).T, lower=True)
        log_det = np.log(np.diag(chol)).sum()
        out[:, k] = -0.5 * (d * np.log(2 * np.pi) + (z**2).sum(axis=0)) - log_det
    with np.errstate(divide="ignore"):
        return out + np.log(model.weights)


def _e_step(X: np.ndarray, model: GmmModel) -> Tuple[np.ndarray, float]:
    weighted = _weighted_log_prob(X, model)
    norm = logsumexp(weighted, axis=1)
    return weighted - norm[:, None], float(norm.mean())


def _fit_once(X: np.ndarray, k: int, opts: GmmOptions, rng: np.random.Generator) -> GmmModel:
    centers = kmeans_plus_plus(X, k, rng)
    labels = np.argmin(_squared_distances(X, centers), axis=1)
    resp = np.zeros((len(X), k))
    resp[np.arange(len(X)), labels] = 1.0
    model = GmmModel(*_m_step(X, resp, opts.reg), converged=False)

    prev = -np.inf
    for n_iter in range(1, opts.max_iter + 1):
        log_resp, ll = _e_step(X, model)
        model.history.append(ll)
        if ll < prev - MONOTONE_TOL:
            logger.warning(f"EM log-likelihood decreased from {prev:.10f} to {ll:.10f} at iteration {n_iter}")
        model.n_iter = n_iter
        if ll - prev < opts.tol:
            model.converged = True
            break
        prev = ll
        weights, means, covariances = _m_step(X, np.exp(log_resp), opts.reg)
        model.weights, model.means, model.covariances = weights, means, covariances
    else:
        _, ll = _e_step(X, model)
        model.history.append(ll)
    model.log_likelihood = model.history[-1]
    if not model.converged:
        logger.warning(f"GMM with K={k} did not converge in {opts.max_iter} iterations")
    return model


def gmm_fit(X: np.ndarray, k: int, opts: GmmOptions = GmmOptions(), seed: int = 0) -> GmmModel:
    """Full-covariance GMM; best of ``opts.n_init`` seeded restarts by mean log-likelihood."""
    X = _check_data(X)
    if not 1 <= k < len(X):
        raise PipelineError(
            f"Cannot fit {k} components to {len(X)} points", "degenerate_input", {"k": k, "n": len(X)}
        )
    best: Optional[GmmModel] = None
    for run in range(opts.n_init):
        model = _fit_once(X, k, opts, substream(seed, "gmm", run))
        if best is None or model.log_likelihood > best.log_likelihood:
            best = model
    logger.debug(f"GMM K={k}: log-likelihood {best.log_likelihood:.4f} after {best.n_iter} iterations")
    return best


def gmm_responsibilities(model: GmmModel, X: np.ndarray) -> np.ndarray:
    X = _check_data(X)
    if X.shape[1] != model.n_features:
        raise PipelineError(
            f"Data has {X.shape[1]} features, model expects {model.n_features}",
            "dimension_mismatch",
            {"data": X.shape[1], "model": model.n_features},
        )
    log_resp, _ = _e_step(X, model)
    return np.exp(log_resp)


def gmm_assign(model: GmmModel, X: np.ndarray) -> np.ndarray:
    """Most responsible component per point; ties go to the lower index."""
    X = _check_data(X)
    if X.shape[1] != model.n_features:
        raise PipelineError(
            f"Data has {X.shape[1]} features, model expects {model.n_features}",
            "dimension_mismatch",
            {"data": X.shape[1], "model": model.n_features},
        )
    return np.argmax(_weighted_log_prob(X, model), axis=1)


def bic(model: GmmModel, n_points: int) -> float:
    return -2.0 * model.log_likelihood * n_points + model.n_parameters() * np.log(n_points)


def gmm_select(X: np.ndarray, k_max: int, opts: GmmOptions = GmmOptions(), seed: int = 0) -> Tuple[GmmModel, List[Tuple[int, float]]]:
    """Fit K = 1..k_max and keep the minimum-BIC model."""
    X = _check_data(X)
    scores = []
    best, best_score = None, np.inf
    for k in range(1, min(k_max, len(X) - 1) + 1):
        model = gmm_fit(X, k, opts, seed)
        score = bic(model, len(X))
        scores.append((k, score))
        if score < best_score:
            best, best_score = model, score
    if best is None:
        raise PipelineError("Too few points for model selection", "degenerate_input", {"n": len(X)})
    logger.info(f"BIC selected K={best.n_components} of {len(scores)} candidates")
    return best, scores


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def n_components(self) -> int:
        return self.components.shape[0]


def pca_fit(X: np.ndarray, p: int) -> PcaModel:
    """Principal axes of the centered data; each axis's largest-magnitude entry is positive.

    ``explained_variance`` lists all D sample variances (zero-padded past rank).
    """
    X = _check_data(X)
    n, d = X.shape
    if p > d or p < 1:
        raise PipelineError(f"Cannot keep {p} components of {d}-D data", "invalid_spec", {"p": p, "D": d})
    if n < 2:
        raise PipelineError("PCA needs at least 2 points", "degenerate_input", {"n": n})
    pca = PCA(n_components=min(n, d), svd_solver="full").fit(X)
    components = pca.components_[:p].copy()
    pivots = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(p), pivots])
    components *= np.where(signs == 0, 1.0, signs)[:, None]
    variance = np.zeros(d)
    variance[: len(pca.explained_variance_)] = pca.explained_variance_
    return PcaModel(pca.mean_.copy(), components, variance)


def pca_transform(model: PcaModel, X: np.ndarray) -> np.ndarray:
    X = _check_data(X)
    if X.shape[1] != model.mean.shape[0]:
        raise PipelineError(
            "Data dimension differs from the fitted PCA",
            "dimension_mismatch",
            {"data": X.shape[1], "model": model.mean.shape[0]},
        )
    return (X - model.mean) @ model.components.T
