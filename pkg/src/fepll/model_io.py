"""Model file serialization and the plain-text covariance importer.

Binary model format (all little-endian):

    magic   8 bytes  b"FEPLLGM1"
    K       u32      number of components (>= 1)
    P       u32      patch dimension
    rho     f64      retained-variability fraction used at flattening time
    then per component:
        weight           f64
        rank             u32
        tail_value       f64
        eigenvalues      rank * f64
        basis            rank * P * f64, column-major (eigenvector-contiguous)

Text covariance dumps (for importing externally trained models):

    first line:  K P
    per component: one line with the weight, then P lines of P values.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .gmm import FlatTailComponent, GmmModel, component_from_eigen, eigen_from_covariance

__all__ = [
    "MODEL_MAGIC",
    "model_write",
    "model_read",
    "read_covariance_text",
    "write_covariance_text",
]

MODEL_MAGIC = b"FEPLLGM1"


def _write_component(fh, comp: FlatTailComponent) -> None:
    fh.write(struct.pack("<dId", comp.weight, comp.rank, comp.tail_value))
    fh.write(comp.kept_eigenvalues.astype("<f8").tobytes())
    fh.write(np.asfortranarray(comp.kept_basis).astype("<f8").tobytes(order="F"))


def model_write(model: GmmModel, path: str | Path) -> None:
    model.validate()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<IId", model.n_components, model.patch_dim, model.rho))
        for comp in model.components:
            _write_component(fh, comp)


def _read_exact(fh, count: int, what: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise DataError(f"truncated model file while reading {what}")
    return buf


def _read_component(fh, patch_dim: int, index: int) -> FlatTailComponent:
    weight, rank, tail = struct.unpack("<dId", _read_exact(fh, 20, f"component {index}"))
    if rank > patch_dim:
        raise DataError(f"component {index}: rank {rank} exceeds patch_dim {patch_dim}")
    vals = np.frombuffer(_read_exact(fh, 8 * rank, f"component {index} eigenvalues"),
                         dtype="<f8").copy()
    basis = np.frombuffer(_read_exact(fh, 8 * rank * patch_dim,
                                      f"component {index} basis"), dtype="<f8")
    basis = basis.reshape((patch_dim, rank), order="F").copy()
    return FlatTailComponent(weight, basis, vals, tail)


def model_read(path: str | Path) -> GmmModel:
    """Read and validate a model file; any structural defect is rejected."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MODEL_MAGIC))
        if magic != MODEL_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}; not a model file")
        n_comp, patch_dim, rho = struct.unpack("<IId", _read_exact(fh, 16, "header"))
        if n_comp == 0:
            raise DataError(f"{path}: model declares zero components")
        if patch_dim == 0:
            raise DataError(f"{path}: model declares zero patch_dim")
        comps = [_read_component(fh, patch_dim, k) for k in range(n_comp)]
        extra = fh.read(1)
        if extra:
            raise DataError(f"{path}: trailing bytes after last component")
    model = GmmModel(patch_dim, comps, rho)
    model.validate()
    return model


def read_covariance_text(path: str | Path) -> GmmModel:
    """Import a plain-text covariance dump as a full-rank model.

    Weights are renormalized when they sum to 1 within 1e-6 and rejected
    otherwise.
    """
    tokens: list[float] = []
    with open(path, "r") as fh:
        for line in fh:
            line = line.split("#", 1)[0]
            tokens.extend(float(t) for t in line.split())
    if len(tokens) < 2:
        raise DataError(f"{path}: missing 'K P' header")
    n_comp, patch_dim = int(tokens[0]), int(tokens[1])
    if n_comp < 1 or patch_dim < 1:
        raise DataError(f"{path}: invalid header K={n_comp} P={patch_dim}")
    expected = 2 + n_comp * (1 + patch_dim * patch_dim)
    if len(tokens) != expected:
        raise DataError(f"{path}: expected {expected} values, found {len(tokens)}")
    pos = 2
    weights = np.empty(n_comp)
    comps = []
    for k in range(n_comp):
        weights[k] = tokens[pos]
        pos += 1
        cov = np.array(tokens[pos:pos + patch_dim * patch_dim])
        cov = cov.reshape(patch_dim, patch_dim)
        pos += patch_dim * patch_dim
        # text dumps carry limited precision; symmetrize before decomposing
        comps.append((weights[k], eigen_from_covariance(0.5 * (cov + cov.T))))
    wsum = weights.sum()
    if abs(wsum - 1.0) > 1e-6:
        raise DataError(f"{path}: weights sum to {wsum}, expected 1")
    model = GmmModel(patch_dim,
                     [component_from_eigen(w / wsum, eig) for w, eig in comps],
                     rho=1.0)
    model.validate()
    return model


def write_covariance_text(model: GmmModel, path: str | Path) -> None:
    """Emit a model as a text covariance dump (inverse of the importer)."""
    with open(path, "w") as fh:
        fh.write(f"{model.n_components} {model.patch_dim}\n")
        for comp in model.components:
            fh.write(f"{float(comp.weight)!r}\n")
            for row in comp.covariance():
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")
