"""Expectation-maximization training of the zero-mean patch mixture.

Components have no mean parameter: patches are DC-removed before training,
so each M-step only re-estimates weights and covariances.  Initialization
is a seeded k-means++-style pick of responsibility centers using a
sign-invariant distance (a zero-mean Gaussian cannot tell z from -z).
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from .errors import DataError, NumericalError
from .gmm import Eigenbasis, GmmModel, component_from_eigen

__all__ = ["em_train"]

EIG_FLOOR_SCALE = 1e-8  # eigenvalue floor: 1e-8 * trace / P


def _sign_invariant_sq_dist(patches: np.ndarray, center: np.ndarray) -> np.ndarray:
    """min(||z - c||^2, ||z + c||^2) for every row z."""
    sq = np.einsum("ij,ij->i", patches, patches) + center @ center
    cross = patches @ center
    return sq - 2.0 * np.abs(cross)


def _seed_centers(patches: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++-style seeding: first center at random, the rest sampled
    proportionally to the squared sign-invariant distance."""
    n = patches.shape[0]
    chosen = [int(rng.integers(n))]
    dist = _sign_invariant_sq_dist(patches, patches[chosen[0]])
    while len(chosen) < k:
        dist = np.clip(dist, 0.0, None)
        total = dist.sum()
        if total <= 0:
            # all remaining patches coincide with a center; pick arbitrarily
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=dist / total))
        chosen.append(idx)
        dist = np.minimum(dist, _sign_invariant_sq_dist(patches, patches[idx]))
    return np.array(chosen)


def _floor_eigen(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetrize and floor the spectrum at 1e-8 * trace / P.

    Returns the floored covariance together with its eigendecomposition
    (ascending order, as returned by eigh).
    """
    cov = 0.5 * (cov + cov.T)
    P = cov.shape[0]
    vals, vecs = np.linalg.eigh(cov)
    floor = EIG_FLOOR_SCALE * max(np.trace(cov), 0.0) / P
    if floor <= 0:
        floor = EIG_FLOOR_SCALE
    vals = np.maximum(vals, floor)
    cov = (vecs * vals) @ vecs.T
    return 0.5 * (cov + cov.T), vals


def _log_densities(patches: np.ndarray, covs: list[np.ndarray],
                   log_weights: np.ndarray) -> np.ndarray:
    """(n, K) matrix of log(w_k) + log N(z; 0, cov_k)."""
    n, P = patches.shape
    out = np.empty((n, len(covs)))
    c0 = -0.5 * P * np.log(2.0 * np.pi)
    for k, cov in enumerate(covs):
        vals, vecs = np.linalg.eigh(cov)
        if vals[0] <= 0:
            raise NumericalError("covariance lost positive definiteness")
        coeffs = patches @ vecs
        quad = np.square(coeffs) @ (1.0 / vals)
        out[:, k] = log_weights[k] + c0 - 0.5 * (np.log(vals).sum() + quad)
    return out


def em_train(patches: np.ndarray, n_components: int, iterations: int = 25,
             seed: int = 0) -> tuple[GmmModel, np.ndarray]:
    """Fit a zero-mean GMM to DC-removed patches.

    Returns the trained full-rank model and the per-iteration data
    log-likelihood (non-decreasing up to the eigenvalue floor and the
    empty-cluster reseeding, both of which perturb the model slightly).

    Empty clusters are re-seeded from the current lowest-likelihood patch.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2:
        raise DataError("patches must be an (n, P) array")
    n, P = patches.shape
    if n_components < 1:
        raise DataError("need at least one component")
    if n_components > n:
        raise DataError(f"{n_components} components but only {n} patches")
    rng = np.random.default_rng(seed)

    centers = _seed_centers(patches, n_components, rng)
    dists = np.stack([_sign_invariant_sq_dist(patches, patches[c]) for c in centers],
                     axis=1)
    assign = np.argmin(dists, axis=1)

    covs: list[np.ndarray] = []
    weights = np.empty(n_components)
    for k in range(n_components):
        members = patches[assign == k]
        if members.shape[0] == 0:
            members = patches[centers[k]][None, :]
        cov = members.T @ members / members.shape[0]
        covs.append(_floor_eigen(cov)[0])
        weights[k] = max(members.shape[0], 1) / n
    weights /= weights.sum()

    history = []
    for _ in range(iterations):
        log_joint = _log_densities(patches, covs, np.log(weights))
        log_norm = logsumexp(log_joint, axis=1)
        history.append(float(log_norm.sum()))
        if not np.isfinite(history[-1]):
            raise NumericalError("log-likelihood became non-finite")
        resp = np.exp(log_joint - log_norm[:, None])

        nk = resp.sum(axis=0)
        for k in np.where(nk < 1e-10 * n)[0]:
            worst = int(np.argmin(log_norm))
            resp[worst, :] = 0.0
            resp[worst, k] = 1.0
        nk = resp.sum(axis=0)

        weights = nk / nk.sum()
        for k in range(n_components):
            cov = (patches * resp[:, k:k + 1]).T @ patches / nk[k]
            covs[k] = _floor_eigen(cov)[0]

    comps = [component_from_eigen(w, _eigen_desc(cov))
             for w, cov in zip(weights, covs)]
    model = GmmModel(P, comps, rho=1.0)
    model.validate()
    return model, np.array(history)


def _eigen_desc(cov: np.ndarray) -> Eigenbasis:
    vals, vecs = np.linalg.eigh(cov)
    return Eigenbasis(np.ascontiguousarray(vecs[:, ::-1]), vals[::-1].copy())
