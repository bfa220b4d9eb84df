"""Visual-space cosine classifier: prototype init, frozen-old training, ensemble.

The classifier holds one unit-norm weight column per seen class.  New
columns start as normalized class prototypes and are trained with
cross-entropy over scaled cosine logits on frozen image features; frozen
columns keep participating in the softmax but never receive an update.
Inference adds ``beta`` times the visual softmax to the text-head
probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from . import linalg
from .data import EmbeddingTable
from .encoder import DualEncoder, _embed, _softmax_rows, classify_text

COSINE_LOGIT_SCALE = 16.0

_SEED_CLF_EPOCH = 606


@dataclass(frozen=True)
class CompensationClassifier:
    """Per-class unit-norm weight columns in visual space."""

    weights: np.ndarray          # (embed_dim, num_seen_classes)
    frozen: np.ndarray           # bool per class
    class_ids: tuple[int, ...]   # global class id per column
    scale: float = COSINE_LOGIT_SCALE

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError("weights must be 2-D")
        frozen = np.asarray(self.frozen, dtype=bool)
        ids = tuple(int(c) for c in self.class_ids)
        if w.shape[1] != frozen.shape[0] or w.shape[1] != len(ids):
            raise ValueError("one frozen flag and class id per column required")
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate class ids")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if w.shape[1]:
            norms = np.linalg.norm(w, axis=0)
            err = np.max(np.abs(norms - 1.0))
            if err > 1e-6:
                raise ValueError(f"columns must be unit norm (max deviation {err:.3e})")
        w = w.copy()
        frozen = frozen.copy()
        w.setflags(write=False)
        frozen.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "frozen", frozen)
        object.__setattr__(self, "class_ids", ids)

    @property
    def embed_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]


def empty_classifier(embed_dim: int, scale: float = COSINE_LOGIT_SCALE) -> CompensationClassifier:
    return CompensationClassifier(
        np.zeros((embed_dim, 0)), np.zeros(0, dtype=bool), (), scale)


def freeze_classes(clf: CompensationClassifier, class_ids: Iterable[int]) -> CompensationClassifier:
    ids = set(int(c) for c in class_ids)
    frozen = clf.frozen.copy()
    for i, c in enumerate(clf.class_ids):
        if c in ids:
            frozen[i] = True
    return CompensationClassifier(clf.weights, frozen, clf.class_ids, clf.scale)


def init_new_classes(clf: CompensationClassifier, image_features: EmbeddingTable,
                     new_classes: Iterable[int]) -> CompensationClassifier:
    """Append one prototype column per new class.

    Each column is the normalized mean of that class's unit-norm features;
    existing columns are untouched.  A class whose features average to zero
    has no usable direction and is rejected.
    """
    new_ids = sorted(set(int(c) for c in new_classes))
    if not new_ids:
        raise ValueError("no new classes given")
    overlap = set(new_ids) & set(clf.class_ids)
    if overlap:
        raise ValueError(f"classes {sorted(overlap)} already present")
    if image_features.dim != clf.embed_dim:
        raise ValueError("feature dimension does not match classifier")

    cols = []
    labels = image_features.labels
    for c in new_ids:
        rows = image_features.vectors[labels == c]
        if rows.shape[0] == 0:
            raise ValueError(f"class {c} has no samples for prototype init")
        proto = np.mean(rows, axis=0)
        norm = np.linalg.norm(proto)
        if norm < 1e-12:
            raise ValueError(f"degenerate prototype (zero mean) for class {c}")
        cols.append(proto / norm)
    new_w = np.column_stack([clf.weights] + cols) if clf.num_classes else np.column_stack(cols)
    frozen = np.concatenate([clf.frozen, np.zeros(len(new_ids), dtype=bool)])
    return CompensationClassifier(new_w, frozen, clf.class_ids + tuple(new_ids), clf.scale)


def cosine_logits(clf: CompensationClassifier, embeddings: np.ndarray) -> np.ndarray:
    """Scaled cosine logits; robust to non-unit inputs and columns."""
    u = embeddings / np.linalg.norm(embeddings, axis=1, keepdims=True)
    wn = clf.weights / np.linalg.norm(clf.weights, axis=0, keepdims=True)
    return clf.scale * (u @ wn)


def classifier_loss_and_grad(weights: np.ndarray, scale: float,
                             features: np.ndarray, cols: np.ndarray):
    """Cross-entropy over scaled cosine logits, with the gradient w.r.t. the
    raw (pre-normalization) weight columns.

    Column normalization is part of the forward pass, so finite differences
    of this loss match the returned gradient everywhere, not just on the
    sphere.
    """
    n = features.shape[0]
    norms = np.linalg.norm(weights, axis=0, keepdims=True)
    wn = weights / norms
    logits = scale * (features @ wn)
    m = logits.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    loss = float((lse[:, 0] - logits[np.arange(n), cols]).mean())

    dlogits = _softmax_rows(logits)
    dlogits[np.arange(n), cols] -= 1.0
    dlogits /= n
    dwn = scale * (features.T @ dlogits)
    # Through per-column normalization.
    grad = (dwn - wn * np.sum(dwn * wn, axis=0, keepdims=True)) / norms
    return loss, grad


def train_classifier(clf: CompensationClassifier, image_features: EmbeddingTable,
                     epochs: int, lr: float, seed: int,
                     batch_size: int = 32) -> CompensationClassifier:
    """SGD on the unfrozen columns over frozen image features.

    Every step applies the projected gradient and renormalizes the touched
    columns, keeping the unit-norm invariant; frozen columns are never
    modified.  Labels are global class ids and must all have a column.
    """
    if clf.num_classes == 0 or bool(clf.frozen.all()):
        raise ValueError("nothing to train: all columns frozen")
    if image_features.dim != clf.embed_dim:
        raise ValueError("feature dimension does not match classifier")
    col_of = {c: i for i, c in enumerate(clf.class_ids)}
    try:
        cols = np.array([col_of[int(l)] for l in image_features.labels], dtype=np.int64)
    except KeyError as e:
        raise ValueError(f"label {e} has no classifier column") from e

    w = clf.weights.copy()
    trainable = ~clf.frozen
    n = image_features.n_rows
    x = image_features.vectors
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, _SEED_CLF_EPOCH, epoch])
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            batch = order[i:i + batch_size]
            _, grad = classifier_loss_and_grad(w, clf.scale, x[batch], cols[batch])
            w[:, trainable] -= lr * grad[:, trainable]
            w[:, trainable] /= np.linalg.norm(w[:, trainable], axis=0, keepdims=True)
    return CompensationClassifier(w, clf.frozen, clf.class_ids, clf.scale)


@dataclass(frozen=True)
class EnsembleConfig:
    """Weight of the visual head in the combined prediction."""

    beta: float = 4.0

    def __post_init__(self):
        if not math.isfinite(self.beta) or self.beta < 0:
            raise ValueError("beta must be finite and >= 0")


def visual_scores(clf: CompensationClassifier, enc: DualEncoder, image_raw) -> np.ndarray:
    """Softmax over the visual cosine logits, columns in classifier order."""
    x = np.asarray(image_raw, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    u = _embed(enc.image_net, x)
    probs = _softmax_rows(cosine_logits(clf, u))
    return probs[0] if single else probs


def ensemble_predict(enc: DualEncoder, clf: CompensationClassifier, image_raw,
                     text_features: EmbeddingTable, cfg: EnsembleConfig) -> np.ndarray:
    """Text-head probabilities plus beta times the visual-head softmax.

    The classifier must cover exactly the classes of ``text_features``.
    Scores are positional over the text table's rows and sum to 1 + beta.
    """
    text_ids = [int(c) for c in text_features.labels]
    if set(text_ids) != set(clf.class_ids) or len(text_ids) != clf.num_classes:
        raise ValueError("class-count mismatch between text features and classifier")
    text_scores = classify_text(enc, image_raw, text_features)
    vis = visual_scores(clf, enc, image_raw)
    # Align classifier columns with text rows by global class id.
    col_of = {c: i for i, c in enumerate(clf.class_ids)}
    perm = np.array([col_of[c] for c in text_ids], dtype=np.int64)
    vis_aligned = vis[..., perm]
    return text_scores + cfg.beta * vis_aligned
