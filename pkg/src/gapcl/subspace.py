"""Subspace coverage analysis and the two classifier-geometry verifications.

Provides energy-truncated SVD bases of feature sets, QR bases of classifier
weight matrices, the coverage distance (mean residual norm of one basis's
columns after projecting onto another subspace), a check that the component
of any linear classifier orthogonal to the feature span cannot change its
loss, and the lower bound on how closely a low-rank-subspace classifier can
approach an optimal one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import linalg
from .data import EmbeddingTable

ENERGY_DEFAULT = 0.95

SOURCE_TAGS = ("image_features", "text_classifier", "visual_classifier", "combined")


@dataclass(frozen=True)
class SubspaceBasis:
    """Orthonormal basis with provenance of how it was extracted."""

    basis: np.ndarray
    provenance: str          # "svd_energy(<threshold>)" or "qr"
    source_tag: str

    def __post_init__(self):
        b = linalg.as_matrix(self.basis, "basis")
        linalg.check_orthonormal(b)
        b = b.copy()
        b.setflags(write=False)
        object.__setattr__(self, "basis", b)

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    @property
    def rank(self) -> int:
        return self.basis.shape[1]


def image_basis(features: EmbeddingTable, energy: float = ENERGY_DEFAULT) -> SubspaceBasis:
    """Feature-space basis keeping the smallest k directions whose squared
    singular values reach the requested energy fraction."""
    if not 0.0 < energy <= 1.0:
        raise ValueError("energy must be in (0, 1]")
    if features.n_rows == 0:
        raise ValueError("empty features")
    res = linalg.svd(features.vectors)
    powers = res.s * res.s
    cumulative = np.cumsum(powers)
    total = float(cumulative[-1])
    k = int(np.searchsorted(cumulative, energy * total - 1e-12) + 1)
    k = min(k, linalg.rank_from_singular_values(res.s))
    k = max(k, 1)
    basis = res.vt[:k].T.copy()
    return SubspaceBasis(basis, f"svd_energy({energy})", "image_features")


def classifier_basis(weights, source_tag: str) -> SubspaceBasis:
    """QR basis of a classifier's weight columns."""
    if source_tag not in SOURCE_TAGS:
        raise ValueError(f"source_tag must be one of {SOURCE_TAGS}")
    return SubspaceBasis(linalg.qr_basis(weights), "qr", source_tag)


def combined_basis(weights_a, weights_b) -> SubspaceBasis:
    """QR basis of the horizontally concatenated classifier columns."""
    a = linalg.as_matrix(weights_a, "weights_a")
    b = linalg.as_matrix(weights_b, "weights_b")
    if a.shape[0] != b.shape[0]:
        raise ValueError("dimension mismatch between classifiers")
    return SubspaceBasis(linalg.qr_basis(np.hstack([a, b])), "qr", "combined")


def coverage_distance(b_source: SubspaceBasis, b_target: SubspaceBasis) -> float:
    """Mean norm of the source columns' components outside the target span.

    0 when the source is contained in the target, 1 when orthogonal to it.
    Computed column by column in source order with einsum projections and a
    plain float accumulator, so a naive loop oracle matches bit for bit.
    """
    if b_source.dim != b_target.dim:
        raise ValueError(f"dimension mismatch: {b_source.dim} vs {b_target.dim}")
    bt = b_target.basis
    total = 0.0
    k = b_source.rank
    for c in range(k):
        x = b_source.basis[:, c]
        coeffs = np.einsum("ij,i->j", bt, x)
        residual = x - np.einsum("ij,j->i", bt, coeffs)
        total += float(np.linalg.norm(residual))
    return total / k


@dataclass(frozen=True)
class OrthogonalIrrelevanceReport:
    """Evidence that the out-of-span classifier component is inert."""

    max_orthogonal_response: float
    loss_full: float
    loss_parallel: float

    @property
    def loss_gap(self) -> float:
        return abs(self.loss_full - self.loss_parallel)

    @property
    def passed(self) -> bool:
        return self.max_orthogonal_response <= 1e-8 and self.loss_gap <= 1e-10


def _mean_ce(logits: np.ndarray, labels: np.ndarray) -> float:
    m = logits.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    return float((lse[:, 0] - logits[np.arange(logits.shape[0]), labels]).mean())


def verify_orthogonal_irrelevance(w, features: EmbeddingTable) -> OrthogonalIrrelevanceReport:
    """Split ``w`` into in-span and out-of-span parts against the feature span
    and confirm the orthogonal part neither responds to the features nor
    moves the cross-entropy loss."""
    wm = linalg.as_matrix(w, "w")
    x = features.vectors
    if wm.shape[0] != x.shape[1]:
        raise ValueError(f"dimension mismatch: w rows {wm.shape[0]}, feature dim {x.shape[1]}")
    labels = features.labels
    if int(labels.max()) >= wm.shape[1]:
        raise ValueError("label without a classifier column")
    span = linalg.qr_basis(x.T)
    w_par = linalg.project_columns(wm, span)
    w_perp = wm - w_par
    max_resp = float(np.max(np.abs(x @ w_perp))) if w_perp.size else 0.0
    loss_full = _mean_ce(x @ wm, labels)
    loss_par = _mean_ce(x @ w_par, labels)
    return OrthogonalIrrelevanceReport(max_resp, loss_full, loss_par)


@dataclass(frozen=True)
class BoundReport:
    """Achieved squared-Frobenius misalignment at the optimal coefficients,
    against the tail-energy lower bound."""

    achieved_error: float
    lower_bound: float
    r: int
    r_prime: int

    def __post_init__(self):
        if self.achieved_error < self.lower_bound - 1e-8:
            raise ValueError("achieved error below the lower bound; check inputs")

    @property
    def tight(self) -> bool:
        return abs(self.achieved_error - self.lower_bound) <= 1e-8


def verify_misalignment_bound(t, w_opt) -> BoundReport:
    """Lower-bound check for approximating an optimal classifier from within
    a feature-limited subspace.

    ``w_opt``'s top-r left singular directions (r = rank of the projection
    of ``t`` onto w_opt's left span) define the reachable subspace; the best
    coefficients are their inner products with ``w_opt``, and the residual
    squared Frobenius error equals the sum of the remaining squared singular
    values.  Returns the achieved error at those optimal coefficients.
    """
    tm = linalg.as_matrix(t, "t")
    wm = linalg.as_matrix(w_opt, "w_opt")
    if tm.shape[0] != wm.shape[0]:
        raise ValueError("dimension mismatch between t and w_opt")
    if np.max(np.abs(wm)) == 0.0:
        raise ValueError("w_opt is zero")
    u, s, _ = linalg.svd(wm)
    r_prime = linalg.rank_from_singular_values(s)
    u_full = u[:, :r_prime]
    t_par = linalg.project_columns(tm, u_full)
    t_par_rank = linalg.rank_from_singular_values(linalg.svd(t_par).s) if np.max(np.abs(t_par)) > 0 else 0
    r = min(t_par_rank, r_prime)
    lower = float(np.sum(s[r:r_prime] ** 2))
    if r == 0:
        achieved = float(np.sum(s[:r_prime] ** 2))
    else:
        u_r = u[:, :r]
        a_star = u_r.T @ wm
        achieved = float(np.linalg.norm(u_r @ a_star - wm, "fro") ** 2)
    return BoundReport(achieved, lower, r, r_prime)


def misalignment_error(u_r: np.ndarray, coeffs: np.ndarray, w_opt: np.ndarray) -> float:
    """Squared Frobenius error of a candidate in-subspace classifier."""
    return float(np.linalg.norm(u_r @ coeffs - np.asarray(w_opt, dtype=np.float64), "fro") ** 2)


def fit_linear_classifier(features: EmbeddingTable, num_classes: int,
                          epochs: int = 300, lr: float = 2.0, seed: int = 0) -> np.ndarray:
    """Train an unconstrained linear classifier to near-convergence by
    full-batch gradient descent; used to instantiate an optimal classifier
    for the bound verification on concrete features."""
    rng = np.random.default_rng([seed, 707])
    x = features.vectors
    labels = features.labels
    n, d = x.shape
    w = 0.01 * rng.standard_normal((d, num_classes))
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), labels] = 1.0
    for _ in range(epochs):
        logits = x @ w
        m = logits.max(axis=1, keepdims=True)
        e = np.exp(logits - m)
        p = e / e.sum(axis=1, keepdims=True)
        w -= lr * (x.T @ (p - onehot)) / n
    return w


def coverage_report(b_image: SubspaceBasis, b_text: SubspaceBasis,
                    b_visual: Optional[SubspaceBasis] = None,
                    b_combined: Optional[SubspaceBasis] = None) -> dict:
    """Coverage distances from the image basis to each classifier basis."""
    out = {
        "rank_image": b_image.rank,
        "rank_text": b_text.rank,
        "d_image_to_text": coverage_distance(b_image, b_text),
    }
    if b_visual is not None:
        out["rank_visual"] = b_visual.rank
        out["d_image_to_visual"] = coverage_distance(b_image, b_visual)
    if b_combined is not None:
        out["rank_combined"] = b_combined.rank
        out["d_image_to_combined"] = coverage_distance(b_image, b_combined)
    return out


def report_to_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def report_to_csv(report: dict) -> str:
    """One CSV row per coverage comparison."""
    lines = ["comparison,value"]
    for key in ("d_image_to_text", "d_image_to_visual", "d_image_to_combined"):
        if key in report:
            lines.append(f"{key},{report[key]!r}")
    return "\n".join(lines) + "\n"
