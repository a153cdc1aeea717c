"""Shared builders for synthetic models and oracle helpers."""

from __future__ import annotations

import numpy as np

from fepll.gmm import (
    FlatTailComponent,
    GmmModel,
    component_from_eigen,
    eigen_from_covariance,
)


def random_spd(rng: np.random.Generator, dim: int, scale: float = 1.0,
               ridge: float = 1e-3) -> np.ndarray:
    M = rng.standard_normal((dim, dim))
    return scale * (M @ M.T / dim) + ridge * np.eye(dim)


def synthetic_model(n_components: int, patch_dim: int, seed: int = 0,
                    scale_spread: float = 4.0) -> GmmModel:
    """Full-rank model with random SPD covariances of varied scale."""
    rng = np.random.default_rng(seed)
    weights = rng.uniform(0.5, 2.0, n_components)
    weights /= weights.sum()
    comps = []
    for k in range(n_components):
        scale = float(scale_spread ** rng.uniform(-1, 1)) * 0.05
        cov = random_spd(rng, patch_dim, scale=scale, ridge=1e-4 * scale)
        comps.append(component_from_eigen(float(weights[k]),
                                          eigen_from_covariance(cov)))
    model = GmmModel(patch_dim, comps, 1.0)
    model.validate()
    return model


def grouped_model(n_groups: int, per_group: int, patch_dim: int,
                  seed: int = 0, ladder: float = 4.0,
                  within_jitter: float = 0.2) -> GmmModel:
    """Model whose components form well-separated groups: group g shares a
    base covariance at scale ladder**g, perturbed per member."""
    rng = np.random.default_rng(seed)
    K = n_groups * per_group
    comps = []
    for g in range(n_groups):
        scale = 0.02 * float(ladder ** g)
        base = random_spd(rng, patch_dim, scale=scale, ridge=1e-5 * ladder ** g)
        for _ in range(per_group):
            pert = random_spd(rng, patch_dim, scale=within_jitter * scale,
                              ridge=1e-9)
            comps.append(component_from_eigen(1.0 / K,
                                              eigen_from_covariance(base + pert)))
    model = GmmModel(patch_dim, comps, 1.0)
    model.validate()
    return model


def sample_from_component(rng: np.random.Generator, comp: FlatTailComponent,
                          count: int) -> np.ndarray:
    cov = comp.covariance()
    L = np.linalg.cholesky(cov + 1e-12 * np.eye(cov.shape[0]))
    return rng.standard_normal((count, cov.shape[0])) @ L.T


def sample_from_model(rng: np.random.Generator, model: GmmModel,
                      count: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw patches from the mixture; returns (patches, generator labels)."""
    labels = rng.choice(model.n_components, size=count, p=model.weights)
    out = np.empty((count, model.patch_dim))
    for k in range(model.n_components):
        members = labels == k
        if members.any():
            out[members] = sample_from_component(rng, model.components[k],
                                                 int(members.sum()))
    return out, labels


def dense_posterior_scores(covs: list[np.ndarray], weights: np.ndarray,
                           patches: np.ndarray, beta: float) -> np.ndarray:
    """Brute-force -2 log(w_k N(z; 0, C_k + I/beta)) without the shared
    P log 2pi constant."""
    P = patches.shape[1]
    out = np.empty((patches.shape[0], len(covs)))
    for k, cov in enumerate(covs):
        M = cov + np.eye(P) / beta
        _, logdet = np.linalg.slogdet(M)
        sol = np.linalg.solve(M, patches.T).T
        quad = np.einsum("ij,ij->i", patches, sol)
        out[:, k] = -2.0 * np.log(weights[k]) + logdet + quad
    return out
