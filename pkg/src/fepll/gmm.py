"""Zero-mean Gaussian mixture patch priors in eigen form.

Each mixture component is stored through the eigendecomposition of its
covariance.  A component may additionally be compressed with a *flat tail*:
only the ``rank`` leading eigenvectors are kept and every discarded
eigenvalue is replaced by their common mean ``tail_value``.  The compressed
covariance is

    C = U_kept diag(s_kept) U_kept^T + tail_value * (I - U_kept U_kept^T)

which preserves the trace exactly and lets every Mahalanobis-type quantity
be evaluated with O(P * rank) multiplies instead of O(P^2).

Patch scoring follows the noisy-patch posterior weight for covariance
``C + (1/beta) I``: up to a constant shared by all components, the score of
component k is

    -2 log w_k + log det(C_k + I/beta) + z^T (C_k + I/beta)^{-1} z

and the patch estimate is the Wiener shrinkage
``(C_k + I/beta)^{-1} C_k z``, both computed in the eigenbasis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError

__all__ = [
    "Eigenbasis",
    "FlatTailComponent",
    "GmmModel",
    "ScoreContext",
    "eigen_from_covariance",
    "flatten_component",
    "component_from_eigen",
    "select_exhaustive",
    "score_flat_cost",
    "wiener_flat_cost",
]


@dataclass
class Eigenbasis:
    """Orthonormal eigenvectors (columns) and non-increasing eigenvalues."""

    basis: np.ndarray        # (P, P)
    eigenvalues: np.ndarray  # (P,), eigenvalues[j] >= eigenvalues[j+1] >= 0

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    def validate(self, tol: float = 1e-10) -> None:
        P = self.dim
        if self.basis.shape != (P, P) or self.eigenvalues.shape != (P,):
            raise DataError(f"inconsistent eigenbasis shapes {self.basis.shape}, "
                            f"{self.eigenvalues.shape}")
        gram = self.basis.T @ self.basis
        dev = np.abs(gram - np.eye(P)).max()
        if dev > tol:
            raise DataError(f"basis not orthonormal (max deviation {dev:.3e})")
        if np.any(np.diff(self.eigenvalues) > 0) or self.eigenvalues[-1] < 0:
            raise DataError("eigenvalues must be non-increasing and nonnegative")

    def reconstruct(self) -> np.ndarray:
        return (self.basis * self.eigenvalues) @ self.basis.T


def eigen_from_covariance(cov: np.ndarray) -> Eigenbasis:
    """Eigendecompose a symmetric positive semidefinite matrix.

    Eigenvalues are clamped at zero and sorted non-increasing.  Rejects
    matrices that are not symmetric within 1e-10 or have an eigenvalue
    below -1e-6 (not a covariance).
    """
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise DataError(f"covariance must be square, got shape {cov.shape}")
    asym = np.abs(cov - cov.T).max()
    if asym > 1e-10:
        raise DataError(f"covariance not symmetric (max asymmetry {asym:.3e})")
    vals, vecs = np.linalg.eigh(cov)
    if vals[0] < -1e-6:
        raise DataError(f"eigenvalue {vals[0]:.3e} below -1e-6: not a covariance")
    vals = np.clip(vals[::-1], 0.0, None)
    vecs = np.ascontiguousarray(vecs[:, ::-1])
    return Eigenbasis(vecs, vals)


@dataclass
class FlatTailComponent:
    """One mixture component: kept eigenpairs plus a flat spectral tail."""

    weight: float
    kept_basis: np.ndarray        # (P, rank)
    kept_eigenvalues: np.ndarray  # (rank,)
    tail_value: float

    @property
    def patch_dim(self) -> int:
        return self.kept_basis.shape[0]

    @property
    def rank(self) -> int:
        return self.kept_basis.shape[1]

    @property
    def tail_dim(self) -> int:
        return self.patch_dim - self.rank

    @property
    def log_weight_term(self) -> float:
        # -2 log w_k, the constant part of the selection score
        return -2.0 * math.log(self.weight)

    def spectrum(self) -> np.ndarray:
        """Full length-P eigenvalue vector (kept values then the flat tail)."""
        return np.concatenate([
            self.kept_eigenvalues,
            np.full(self.tail_dim, self.tail_value),
        ])

    def trace(self) -> float:
        return float(self.kept_eigenvalues.sum() + self.tail_dim * self.tail_value)

    def covariance(self) -> np.ndarray:
        """Dense reconstruction of the (possibly compressed) covariance."""
        P = self.patch_dim
        U = self.kept_basis
        cov = (U * (self.kept_eigenvalues - self.tail_value)) @ U.T
        cov += self.tail_value * np.eye(P)
        return cov

    def validate(self, tol: float = 1e-10) -> None:
        if not (self.weight > 0):
            raise DataError(f"component weight must be positive, got {self.weight}")
        if self.tail_value < 0:
            raise DataError(f"negative tail value {self.tail_value}")
        if self.kept_eigenvalues.shape != (self.rank,):
            raise DataError("kept eigenvalue count does not match basis rank")
        if self.rank:
            gram = self.kept_basis.T @ self.kept_basis
            dev = np.abs(gram - np.eye(self.rank)).max()
            if dev > tol:
                raise DataError(f"kept basis not orthonormal (max deviation {dev:.3e})")
            if np.any(np.diff(self.kept_eigenvalues) > 0) or self.kept_eigenvalues[-1] < 0:
                raise DataError("kept eigenvalues must be non-increasing and nonnegative")
            if self.rank < self.patch_dim and self.kept_eigenvalues[-1] < self.tail_value - tol:
                raise DataError("flat tail exceeds the smallest kept eigenvalue")


def component_from_eigen(weight: float, eig: Eigenbasis) -> FlatTailComponent:
    """Full-rank component (no compression, empty tail)."""
    return FlatTailComponent(weight, eig.basis.copy(), eig.eigenvalues.copy(), 0.0)


def flatten_component(weight: float, eig: Eigenbasis, rho: float) -> FlatTailComponent:
    """Compress a spectrum, keeping the smallest rank that explains a
    ``rho`` fraction of the total variability; discarded eigenvalues are
    replaced by their mean so the trace is preserved.
    """
    if not (0.0 < rho <= 1.0):
        raise DataError(f"rho must lie in (0, 1], got {rho}")
    vals = eig.eigenvalues
    P = eig.dim
    cum = np.cumsum(vals)
    total = cum[-1] if P else 0.0
    if total <= 0.0:
        # degenerate zero covariance: empty kept set, zero tail
        return FlatTailComponent(weight, eig.basis[:, :0].copy(), vals[:0].copy(), 0.0)
    if rho == 1.0:
        rank = P
    else:
        rank = int(np.searchsorted(cum, rho * total, side="left")) + 1
        rank = min(rank, P)
    tail = float(vals[rank:].mean()) if rank < P else 0.0
    return FlatTailComponent(
        weight,
        np.ascontiguousarray(eig.basis[:, :rank]),
        vals[:rank].copy(),
        tail,
    )


@dataclass
class GmmModel:
    """Zero-mean GMM over DC-removed patches; components share patch_dim."""

    patch_dim: int
    components: list[FlatTailComponent]
    rho: float = 1.0

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components])

    @property
    def ranks(self) -> np.ndarray:
        return np.array([c.rank for c in self.components])

    @property
    def mean_rank(self) -> float:
        return float(self.ranks.mean())

    @property
    def is_full_rank(self) -> bool:
        return bool(np.all(self.ranks == self.patch_dim))

    def validate(self, tol: float = 1e-10) -> None:
        if self.n_components == 0:
            raise DataError("model must contain at least one component")
        if not (0.0 < self.rho <= 1.0):
            raise DataError(f"rho must lie in (0, 1], got {self.rho}")
        for k, comp in enumerate(self.components):
            if comp.patch_dim != self.patch_dim:
                raise DataError(f"component {k} has patch_dim {comp.patch_dim}, "
                                f"expected {self.patch_dim}")
            comp.validate(tol)
        wsum = self.weights.sum()
        if abs(wsum - 1.0) > 1e-12:
            raise DataError(f"component weights sum to {wsum!r}, expected 1")

    def covariance(self, k: int) -> np.ndarray:
        return self.components[k].covariance()

    def mixture_covariance(self) -> np.ndarray:
        out = np.zeros((self.patch_dim, self.patch_dim))
        for comp in self.components:
            out += comp.weight * comp.covariance()
        return out

    def flatten(self, rho: float) -> "GmmModel":
        """Flat-tail compress every component at retained fraction rho."""
        if not self.is_full_rank:
            raise DataError("model is already flat-tail compressed; "
                            "flatten from the full-rank model")
        comps = [
            flatten_component(c.weight, Eigenbasis(c.kept_basis, c.kept_eigenvalues), rho)
            for c in self.components
        ]
        return GmmModel(self.patch_dim, comps, rho)


def score_flat_cost(rank: int, patch_dim: int) -> int:
    """Multiplies used by one flat-tail score evaluation (projection,
    squared coefficients, weighted sum, norm term)."""
    return rank * patch_dim + 2 * rank + 1


def wiener_flat_cost(rank: int, patch_dim: int) -> int:
    """Multiplies used by one flat-tail patch estimate, reusing the
    projection computed during selection."""
    return rank * patch_dim + rank + patch_dim


class ScoreContext:
    """Per-component quantities derived from the spectrum at a given beta.

    For component k with kept eigenvalues s_j and tail value t:
        nu_j      = s_j + 1/beta          gamma_j    = s_j / nu_j
        nu_tail   = t + 1/beta            gamma_tail = t / nu_tail
    plus the constants of the selection score.
    """

    def __init__(self, components: Sequence[FlatTailComponent], beta: float):
        if not (beta > 0):
            raise DataError(f"beta must be positive, got {beta}")
        if len(components) == 0:
            raise DataError("score context needs at least one component")
        self.beta = float(beta)
        self.components = list(components)
        inv_beta = 1.0 / beta
        self.nu: list[np.ndarray] = []
        self.gamma: list[np.ndarray] = []
        self.nu_tail = np.empty(len(components))
        self.gamma_tail = np.empty(len(components))
        self.iota = np.empty(len(components))
        self._sq_weight: list[np.ndarray] = []   # 1/nu_j - 1/nu_tail
        self._const = np.empty(len(components))  # iota + tail_dim*log(nu_tail) + sum log nu
        self._shrink: list[np.ndarray] = []      # gamma_j - gamma_tail
        for k, comp in enumerate(components):
            nu = comp.kept_eigenvalues + inv_beta
            nu_tail = comp.tail_value + inv_beta
            if nu_tail <= 0 or (nu.size and nu.min() <= 0):
                raise DataError("nonpositive nu; spectrum or beta invalid")
            gamma = comp.kept_eigenvalues / nu
            gamma_tail = comp.tail_value / nu_tail
            self.nu.append(nu)
            self.gamma.append(gamma)
            self.nu_tail[k] = nu_tail
            self.gamma_tail[k] = gamma_tail
            self.iota[k] = comp.log_weight_term
            self._sq_weight.append(1.0 / nu - 1.0 / nu_tail)
            self._const[k] = (self.iota[k]
                              + comp.tail_dim * math.log(nu_tail)
                              + np.log(nu).sum())
            self._shrink.append(gamma - gamma_tail)

    @property
    def n_components(self) -> int:
        return len(self.components)

    def _as_batch(self, patches: np.ndarray, k: int) -> tuple[np.ndarray, bool]:
        patches = np.asarray(patches, dtype=np.float64)
        single = patches.ndim == 1
        if single:
            patches = patches[None, :]
        if patches.shape[1] != self.components[k].patch_dim:
            raise DataError(f"patch length {patches.shape[1]} does not match "
                            f"patch_dim {self.components[k].patch_dim}")
        return patches, single

    def score_flat(self, k: int, patches: np.ndarray,
                   sq_norms: np.ndarray | None = None) -> np.ndarray | float:
        """Selection score of component k for DC-removed patches.

        ``sq_norms`` is ||z||^2 per patch; the caller computes it once and
        shares it across components.
        """
        patches, single = self._as_batch(patches, k)
        if sq_norms is None:
            sq_norms = np.einsum("ij,ij->i", patches, patches)
        else:
            sq_norms = np.atleast_1d(np.asarray(sq_norms, dtype=np.float64))
        coeffs = patches @ self.components[k].kept_basis
        scores = (self._const[k]
                  + sq_norms / self.nu_tail[k]
                  + np.square(coeffs) @ self._sq_weight[k])
        return float(scores[0]) if single else scores

    def score_exact(self, k: int, patches: np.ndarray) -> np.ndarray | float:
        """Selection score evaluated without tail terms (rank must equal P)."""
        comp = self.components[k]
        if comp.rank != comp.patch_dim:
            raise DataError("score_exact requires a full-rank component")
        patches, single = self._as_batch(patches, k)
        coeffs = patches @ comp.kept_basis
        scores = (self.iota[k] + np.log(self.nu[k]).sum()
                  + np.square(coeffs) @ (1.0 / self.nu[k]))
        return float(scores[0]) if single else scores

    def wiener_flat(self, k: int, patches: np.ndarray) -> np.ndarray:
        """Wiener patch estimate under component k: U ((gamma - gamma_tail) c)
        plus gamma_tail z."""
        patches, single = self._as_batch(patches, k)
        U = self.components[k].kept_basis
        coeffs = patches @ U
        est = (coeffs * self._shrink[k]) @ U.T + self.gamma_tail[k] * patches
        return est[0] if single else est

    def wiener_exact(self, k: int, patches: np.ndarray) -> np.ndarray:
        """Wiener estimate without tail terms (rank must equal P)."""
        comp = self.components[k]
        if comp.rank != comp.patch_dim:
            raise DataError("wiener_exact requires a full-rank component")
        patches, single = self._as_batch(patches, k)
        coeffs = patches @ comp.kept_basis
        est = (coeffs * self.gamma[k]) @ comp.kept_basis.T
        return est[0] if single else est

    def score_all(self, patches: np.ndarray,
                  sq_norms: np.ndarray | None = None) -> np.ndarray:
        """(n, K) matrix of flat scores for every component."""
        patches = np.atleast_2d(np.asarray(patches, dtype=np.float64))
        if sq_norms is None:
            sq_norms = np.einsum("ij,ij->i", patches, patches)
        out = np.empty((patches.shape[0], self.n_components))
        for k in range(self.n_components):
            out[:, k] = self.score_flat(k, patches, sq_norms)
        return out


def select_exhaustive(ctx: ScoreContext, patches: np.ndarray,
                      sq_norms: np.ndarray | None = None) -> np.ndarray | int:
    """Index of the minimum-score component per patch; ties go to the
    lowest index."""
    patches = np.asarray(patches, dtype=np.float64)
    single = patches.ndim == 1
    scores = ctx.score_all(patches, sq_norms)
    best = np.argmin(scores, axis=1)
    return int(best[0]) if single else best
