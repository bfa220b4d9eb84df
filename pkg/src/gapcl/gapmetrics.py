"""Modality-gap statistics: matched/mismatched pair cosines and relative drift.

``pos`` is the mean cosine between each image and its own class text, ``neg``
the mean over the other classes (inner average over K-1, outer over images),
and ``inter_modality_mean`` the mean over all image-text pairs.

The accumulation order is pinned: pair similarities come from an einsum
product and the sums run image-major, class-ascending, in plain float64.
A naive double loop over the same rows reproduces every statistic bit for
bit, which is how the test oracles check this module.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import linalg
from .data import EmbeddingTable

CSV_HEADER = "pos,neg,inter_modality_mean,n_images,n_classes"


@dataclass(frozen=True)
class GapReport:
    """Pos/neg/inter-modality cosine statistics for one model state."""

    pos: float
    neg: float
    inter_modality_mean: float
    n_images: int
    n_classes: int

    def __post_init__(self):
        # Tolerance matches the tables' unit-norm guarantee: float32-quantized
        # unit rows can push a cosine past 1 by a few 1e-8.
        for name in ("pos", "neg", "inter_modality_mean"):
            v = getattr(self, name)
            if not -1.0 - 1e-6 <= v <= 1.0 + 1e-6:
                raise ValueError(f"{name}={v} outside [-1, 1]")

    def to_csv_row(self) -> str:
        return (f"{self.pos!r},{self.neg!r},{self.inter_modality_mean!r},"
                f"{self.n_images},{self.n_classes}")


def measure_gap(images: EmbeddingTable, texts: EmbeddingTable) -> GapReport:
    """Compute pos, neg, and the inter-modality mean for an image/text pair.

    ``texts`` must hold one row per class; every image label must index a
    text row (positionally).  Table rows are unit norm by construction, so
    each cosine is a plain inner product.
    """
    k = texts.n_rows
    if k < 2:
        raise ValueError("neg undefined for single class")
    if images.dim != texts.dim:
        raise ValueError(f"dimension mismatch: images dim {images.dim}, texts dim {texts.dim}")
    n = images.n_rows
    labels = images.labels
    if int(labels.max()) >= k:
        raise ValueError("image label without a matching text row")

    sims = linalg.pairwise_dots(images.vectors, texts.vectors)

    pos_total = 0.0
    neg_total = 0.0
    inter_total = 0.0
    for i in range(n):
        row = sims[i].tolist()
        y = int(labels[i])
        pos_total += row[y]
        neg_row = 0.0
        inter_row = 0.0
        for j in range(k):
            inter_row += row[j]
            if j != y:
                neg_row += row[j]
        neg_total += neg_row / (k - 1)
        inter_total += inter_row / k
    return GapReport(
        pos=pos_total / n,
        neg=neg_total / n,
        inter_modality_mean=inter_total / n,
        n_images=n,
        n_classes=k,
    )


def relative_delta(neg_now: float, neg_ref: float) -> float:
    """Relative drift ``|neg_now - neg_ref| / neg_ref`` of the negative mean.

    The denominator is the signed reference, verbatim: a negative reference
    (anti-correlated modalities) flips the sign of the result.  A zero
    reference means degenerate pretraining and is a hard error.
    """
    if neg_ref == 0.0:
        raise ValueError("reference gap is zero")
    return abs(neg_now - neg_ref) / neg_ref
