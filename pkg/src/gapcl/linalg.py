"""Dense linear-algebra kernels: SVD, rank-revealing QR bases, projections, cosines.

Matrices are plain float64 numpy arrays (row-major).  All public operations
validate finiteness and reject degenerate inputs loudly instead of producing
NaN downstream.

Pairwise inner products go through ``np.einsum`` rather than BLAS matmul:
einsum accumulates each output element in a fixed sequential order, so the
matrix form is bit-identical to per-pair calls.  Statistics built on top of
these kernels can therefore be checked against naive loop oracles exactly.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
import scipy.linalg

# Singular values / pivot magnitudes below this are treated as zero rank.
RANK_TOL = 1e-10


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting non-finite entries."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if a.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def as_vector(v, name: str = "vector") -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {a.shape}")
    if a.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


class SvdResult(NamedTuple):
    """Thin SVD ``m = u @ diag(s) @ vt`` with s sorted descending."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray


def svd(m) -> SvdResult:
    """Thin singular value decomposition of a dense matrix.

    Returns orthonormal ``u`` (left singular vectors as columns), singular
    values ``s`` descending, and ``vt`` (right singular vectors as rows).
    """
    a = as_matrix(m)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    return SvdResult(u, s, vt)


def rank_from_singular_values(s: np.ndarray, tol: float = RANK_TOL) -> int:
    return int(np.count_nonzero(s > tol))


def qr_basis(m) -> np.ndarray:
    """Orthonormal basis for the column space of ``m``.

    Uses column-pivoted QR so rank-deficient input simply yields fewer basis
    columns; pivot magnitudes below RANK_TOL are dropped.
    """
    a = as_matrix(m)
    q, r, _ = scipy.linalg.qr(a, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.count_nonzero(diag > RANK_TOL))
    if rank == 0:
        raise ValueError("zero subspace: matrix has no nonzero columns")
    return np.ascontiguousarray(q[:, :rank])


def check_orthonormal(basis: np.ndarray, tol: float = 1e-8, name: str = "basis") -> None:
    gram = basis.T @ basis
    err = np.max(np.abs(gram - np.eye(basis.shape[1])))
    if err > tol:
        raise ValueError(f"{name} columns are not orthonormal (max deviation {err:.3e})")


def project_onto(x, basis) -> np.ndarray:
    """Orthogonal projection ``B @ (B.T @ x)`` onto span of an orthonormal basis."""
    v = as_vector(x, "x")
    b = as_matrix(basis, "basis")
    if b.shape[0] != v.shape[0]:
        raise ValueError(f"dimension mismatch: x has {v.shape[0]}, basis rows {b.shape[0]}")
    check_orthonormal(b)
    coeffs = np.einsum("ij,i->j", b, v)
    return np.einsum("ij,j->i", b, coeffs)


def project_columns(s: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Project every column of ``s`` onto span(basis); einsum keeps each column
    bit-identical to a separate project_onto call."""
    coeffs = np.einsum("ij,ic->jc", basis, s)
    return np.einsum("ij,jc->ic", basis, coeffs)


def cosine(a, b) -> float:
    """Cosine similarity of two nonzero vectors."""
    x = as_vector(a, "a")
    y = as_vector(b, "b")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise ValueError("cosine undefined for zero vector")
    return float(np.einsum("i,i->", x, y) / (nx * ny))


def pairwise_dots(rows_a: np.ndarray, rows_b: np.ndarray) -> np.ndarray:
    """All inner products between rows of two matrices, shape (na, nb)."""
    return np.einsum("nd,kd->nk", rows_a, rows_b)


def normalize_rows(m: np.ndarray) -> np.ndarray:
    """Scale every row to unit L2 norm; zero rows are rejected."""
    a = as_matrix(m)
    norms = np.linalg.norm(a, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("cannot normalize zero row")
    return a / norms[:, None]
