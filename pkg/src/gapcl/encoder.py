"""Toy dual encoder: two small MLPs, low-rank adapters, and training losses.

Each encoder is a 2-layer tanh network mapping raw inputs to L2-normalized
embeddings.  Pretraining runs a symmetric in-batch contrastive loss over
paired image/text inputs and learns the logit scale; per-task fine-tuning
touches only low-rank adapter parameters against a frozen table of class
text features, under plain, masked, or alignment-augmented cross-entropy.

Gradients are computed analytically (closed-form backprop) so they can be
validated against central finite differences.  All training is plain SGD
with a cosine learning-rate curve; fine-tuning restarts the curve every
epoch so an e-epoch call is step-for-step identical to e chained one-epoch
calls (the preservation probe depends on this).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np

from . import linalg
from .data import EmbeddingTable, make_table

LOSS_MODES = ("masked_ce", "ce_plus_alignment", "plain_ce", "contrastive_pretrain")

LOGIT_SCALE_INIT = 10.0
LOGIT_SCALE_MIN = 1.0
LOGIT_SCALE_MAX = 100.0
# The scale trains in log space with its own rate; left at the SGD rate it
# barely moves, and a sluggish temperature lets the contrastive loss keep
# spreading the classes until the negative-pair mean collapses below zero.
LOGIT_SCALE_LR_MULT = 10.0

_SEED_INIT = 303
_SEED_ADAPTER = 404
_SEED_EPOCH = 505


@dataclass
class LowRankAdapter:
    """Additive low-rank weight update ``a @ b`` with rank <= r.

    ``b`` starts at zero so a freshly adapted model equals the base model.
    """

    a: np.ndarray
    b: np.ndarray

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    def delta(self) -> np.ndarray:
        return self.a @ self.b

    def copy(self) -> "LowRankAdapter":
        return LowRankAdapter(self.a.copy(), self.b.copy())


@dataclass
class EncoderNet:
    """2-layer tanh MLP: raw_dim -> hidden -> embed_dim."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ad1: Optional[LowRankAdapter] = None
    ad2: Optional[LowRankAdapter] = None

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[0]

    def effective_weights(self) -> tuple[np.ndarray, np.ndarray]:
        w1 = self.w1 + self.ad1.delta() if self.ad1 is not None else self.w1
        w2 = self.w2 + self.ad2.delta() if self.ad2 is not None else self.w2
        return w1, w2

    def copy(self) -> "EncoderNet":
        return EncoderNet(
            self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(),
            self.ad1.copy() if self.ad1 is not None else None,
            self.ad2.copy() if self.ad2 is not None else None,
        )


@dataclass
class DualEncoder:
    """Paired image/text encoders plus the contrastive logit scale."""

    image_net: EncoderNet
    text_net: EncoderNet
    logit_scale: float = LOGIT_SCALE_INIT

    def __post_init__(self):
        if self.logit_scale <= 0:
            raise ValueError("logit_scale must be positive")

    @property
    def embed_dim(self) -> int:
        return self.image_net.out_dim

    @property
    def has_adapters(self) -> bool:
        return self.image_net.ad1 is not None

    def copy(self) -> "DualEncoder":
        return DualEncoder(self.image_net.copy(), self.text_net.copy(), self.logit_scale)


@dataclass(frozen=True)
class TrainConfig:
    loss_mode: str
    learning_rate: float
    epochs: int
    batch_size: int = 32
    alignment_weight: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass(frozen=True)
class TaskData:
    """Raw image inputs for one task, with global labels and the task's classes."""

    raw: np.ndarray
    labels: np.ndarray
    class_ids: tuple[int, ...]

    def __post_init__(self):
        raw = linalg.as_matrix(self.raw, "raw")
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1 or labels.shape[0] != raw.shape[0]:
            raise ValueError("labels must be one entry per raw row")
        ids = tuple(int(c) for c in self.class_ids)
        if not ids or len(set(ids)) != len(ids):
            raise ValueError("class_ids must be non-empty and unique")
        object.__setattr__(self, "raw", raw)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_ids", ids)

    @property
    def n(self) -> int:
        return self.raw.shape[0]


def new_dual_encoder(raw_image_dim: int, raw_text_dim: int, embed_dim: int = 32,
                     hidden_dim: Optional[int] = None, seed: int = 0,
                     cone_bias: float = 0.5, cone_cos: float = 0.5) -> DualEncoder:
    """Freshly initialized dual encoder (no adapters, logit scale at its init).

    The output biases start on two correlated directions (relative strength
    ``cone_bias``, direction cosine ``cone_cos``), so each modality's fresh
    embeddings form a narrow cone and the two cones sit at an angle.  Short
    contrastive pretraining then builds class structure inside the cones
    while both negative and inter-modality mean cosines stay genuinely
    positive, the regime the gap statistics assume.
    """
    hidden = hidden_dim if hidden_dim is not None else 2 * embed_dim
    rng = np.random.default_rng([seed, _SEED_INIT])

    def net(in_dim, anchor):
        w1 = rng.standard_normal((hidden, in_dim)) / math.sqrt(in_dim)
        w2 = rng.standard_normal((embed_dim, hidden)) / math.sqrt(hidden)
        return EncoderNet(w1, np.zeros(hidden), w2, anchor)

    u_text = rng.standard_normal(embed_dim)
    u_text /= np.linalg.norm(u_text)
    v = rng.standard_normal(embed_dim)
    v -= (v @ u_text) * u_text
    v /= np.linalg.norm(v)
    u_image = cone_cos * u_text + math.sqrt(max(0.0, 1.0 - cone_cos ** 2)) * v
    # 0.6 * sqrt(embed_dim) approximates the pre-bias output norm of the
    # tanh stack, making cone_bias a relative strength.
    anchor_norm = cone_bias * 0.6 * math.sqrt(embed_dim)
    return DualEncoder(net(raw_image_dim, anchor_norm * u_image),
                       net(raw_text_dim, anchor_norm * u_text))


def attach_adapters(enc: DualEncoder, rank: int = 8, seed: int = 0) -> DualEncoder:
    """Attach zero-initialized low-rank adapters to every weight matrix.

    ``b`` is zero, so the adapted model's outputs are bit-identical to the
    base model until fine-tuning moves the adapters.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    rng = np.random.default_rng([seed, _SEED_ADAPTER])
    out = enc.copy()
    for net in (out.image_net, out.text_net):
        for attr, w in (("ad1", net.w1), ("ad2", net.w2)):
            a = rng.standard_normal((w.shape[0], rank)) / math.sqrt(rank)
            b = np.zeros((rank, w.shape[1]))
            setattr(net, attr, LowRankAdapter(a, b))
    return out


# ---------------------------------------------------------------------------
# forward / backward


def _forward(net: EncoderNet, x: np.ndarray):
    if x.shape[1] != net.in_dim:
        raise ValueError(f"dimension mismatch: input dim {x.shape[1]}, encoder expects {net.in_dim}")
    w1, w2 = net.effective_weights()
    h = np.tanh(x @ w1.T + net.b1)
    e = h @ w2.T + net.b2
    norms = np.linalg.norm(e, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero embedding produced; cannot normalize")
    u = e / norms[:, None]
    return u, (x, h, u, norms, w2)


def _backward(net: EncoderNet, cache, du: np.ndarray,
              base: bool, adapters: bool) -> dict[str, np.ndarray]:
    x, h, u, norms, w2 = cache
    # Through row normalization: d/de of e/|e| applied to du.
    de = (du - np.sum(du * u, axis=1, keepdims=True) * u) / norms[:, None]
    dw2 = de.T @ h
    db2 = de.sum(axis=0)
    dh = de @ w2
    dz = dh * (1.0 - h * h)
    dw1 = dz.T @ x
    db1 = dz.sum(axis=0)
    grads: dict[str, np.ndarray] = {}
    if base:
        grads.update(w1=dw1, b1=db1, w2=dw2, b2=db2)
    if adapters:
        if net.ad1 is None or net.ad2 is None:
            raise ValueError("adapters not attached")
        grads["ad1.a"] = dw1 @ net.ad1.b.T
        grads["ad1.b"] = net.ad1.a.T @ dw1
        grads["ad2.a"] = dw2 @ net.ad2.b.T
        grads["ad2.b"] = net.ad2.a.T @ dw2
    return grads


def _embed(net: EncoderNet, raw) -> np.ndarray:
    u, _ = _forward(net, linalg.as_matrix(raw, "raw"))
    return u


def embed_images(enc: DualEncoder, raw, labels=None, class_names=None) -> EmbeddingTable:
    """Unit-norm image embeddings as a table (labels default to zeros)."""
    u = _embed(enc.image_net, raw)
    if labels is None:
        labels = np.zeros(u.shape[0], dtype=np.int64)
    return make_table(u, labels, "image", class_names)


def embed_texts(enc: DualEncoder, raw, labels=None, class_names=None) -> EmbeddingTable:
    """Unit-norm text embeddings as a table (labels default to row order)."""
    u = _embed(enc.text_net, raw)
    if labels is None:
        labels = np.arange(u.shape[0], dtype=np.int64)
    return make_table(u, labels, "text", class_names)


# ---------------------------------------------------------------------------
# losses (each returns loss plus analytic gradients for the requested params)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    return logits - lse


def text_ce_loss_and_grads(enc: DualEncoder, raw, label_rows: np.ndarray,
                           text_vectors: np.ndarray, allowed_rows: np.ndarray,
                           alignment_weight: float = 0.0,
                           train_base: bool = False, train_adapters: bool = True):
    """Cross-entropy of the text head over the allowed class rows.

    ``label_rows`` index into ``text_vectors``; they must all appear in
    ``allowed_rows`` (rows outside it contribute no logit and no gradient).
    With ``alignment_weight`` > 0, adds that weight times the mean squared
    Euclidean distance between matched normalized embeddings.
    """
    x = linalg.as_matrix(raw, "raw")
    n = x.shape[0]
    allowed = np.asarray(allowed_rows, dtype=np.int64)
    if allowed.size == 0:
        raise ValueError("no classes left unmasked")
    col_of = {int(r): c for c, r in enumerate(allowed)}
    try:
        cols = np.array([col_of[int(r)] for r in label_rows], dtype=np.int64)
    except KeyError as e:
        raise ValueError(f"label row {e} is masked out of the loss") from e

    u, cache = _forward(enc.image_net, x)
    t_allowed = text_vectors[allowed]
    logits = enc.logit_scale * (u @ t_allowed.T)
    logp = _log_softmax_rows(logits)
    loss = float(-logp[np.arange(n), cols].mean())

    dlogits = _softmax_rows(logits)
    dlogits[np.arange(n), cols] -= 1.0
    dlogits /= n
    du = enc.logit_scale * (dlogits @ t_allowed)

    if alignment_weight != 0.0:
        t_matched = text_vectors[np.asarray(label_rows, dtype=np.int64)]
        diff = u - t_matched
        loss += alignment_weight * float((diff * diff).sum() / n)
        du = du + alignment_weight * (2.0 / n) * diff

    grads = {f"image.{k}": v for k, v in
             _backward(enc.image_net, cache, du, train_base, train_adapters).items()}
    return loss, grads


def contrastive_loss_and_grads(enc: DualEncoder, raw_image, raw_text,
                               train_base: bool = True, train_adapters: bool = False,
                               train_scale: bool = True):
    """Symmetric in-batch contrastive loss over matched image/text pairs."""
    xi = linalg.as_matrix(raw_image, "raw_image")
    xt = linalg.as_matrix(raw_text, "raw_text")
    n = xi.shape[0]
    if xt.shape[0] != n:
        raise ValueError("image/text pair count mismatch")
    if n < 2:
        raise ValueError("contrastive batch with a single pair is undefined")

    ui, ci = _forward(enc.image_net, xi)
    ut, ct = _forward(enc.text_net, xt)
    s = enc.logit_scale
    m = s * (ui @ ut.T)

    logp_r = _log_softmax_rows(m)
    logp_c = _log_softmax_rows(m.T)
    idx = np.arange(n)
    loss = float(-(logp_r[idx, idx].mean() + logp_c[idx, idx].mean()) / 2.0)

    p_r = _softmax_rows(m)
    p_c = _softmax_rows(m.T).T
    eye = np.eye(n)
    dm = ((p_r - eye) + (p_c - eye)) / (2.0 * n)

    dui = s * (dm @ ut)
    dut = s * (dm.T @ ui)
    grads: dict[str, np.ndarray] = {}
    grads.update({f"image.{k}": v for k, v in
                  _backward(enc.image_net, ci, dui, train_base, train_adapters).items()})
    grads.update({f"text.{k}": v for k, v in
                  _backward(enc.text_net, ct, dut, train_base, train_adapters).items()})
    if train_scale:
        grads["logit_scale"] = np.array(float((dm * m).sum() / s))
    return loss, grads


# ---------------------------------------------------------------------------
# parameter addressing and SGD


def get_param(enc: DualEncoder, key: str) -> np.ndarray:
    if key == "logit_scale":
        return np.array(enc.logit_scale)
    side, _, rest = key.partition(".")
    net = enc.image_net if side == "image" else enc.text_net
    if rest.startswith("ad"):
        name, _, leaf = rest.partition(".")
        return getattr(getattr(net, name), leaf)
    return getattr(net, rest)


def set_param(enc: DualEncoder, key: str, value: np.ndarray) -> None:
    if key == "logit_scale":
        enc.logit_scale = float(value)
        return
    side, _, rest = key.partition(".")
    net = enc.image_net if side == "image" else enc.text_net
    if rest.startswith("ad"):
        name, _, leaf = rest.partition(".")
        setattr(getattr(net, name), leaf, value)
    else:
        setattr(net, rest, value)


def _cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 1:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / (total - 1)))


def _apply_step(enc: DualEncoder, grads: dict[str, np.ndarray], lr: float) -> None:
    for key, g in grads.items():
        if key == "logit_scale":
            s = enc.logit_scale
            log_s = math.log(s) - lr * LOGIT_SCALE_LR_MULT * float(g) * s
            enc.logit_scale = float(
                np.clip(math.exp(log_s), LOGIT_SCALE_MIN, LOGIT_SCALE_MAX))
        else:
            set_param(enc, key, get_param(enc, key) - lr * g)


def _epoch_batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def pretrain_contrastive(enc: DualEncoder, raw_image, raw_text, labels,
                         cfg: TrainConfig) -> DualEncoder:
    """Contrastive pretraining over (image, class text) pairs.

    Trains the base weights of both encoders and the logit scale (clamped to
    [1, 100]); the caller freezes the scale afterwards simply by never
    training it again.  Returns a new encoder; the input is untouched.
    """
    if cfg.loss_mode != "contrastive_pretrain":
        raise ValueError("pretrain_contrastive requires loss_mode=contrastive_pretrain")
    xi = linalg.as_matrix(raw_image, "raw_image")
    xt_rows = linalg.as_matrix(raw_text, "raw_text")
    y = np.asarray(labels, dtype=np.int64)
    if y.shape[0] != xi.shape[0]:
        raise ValueError("labels must be one entry per image row")
    if y.max() >= xt_rows.shape[0]:
        raise ValueError("label without a matching text row")

    out = enc.copy()
    if cfg.epochs == 0:
        return out
    n = xi.shape[0]
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, _SEED_EPOCH, epoch])
        for batch in _epoch_batches(n, cfg.batch_size, rng):
            _, grads = contrastive_loss_and_grads(out, xi[batch], xt_rows[y[batch]])
            _apply_step(out, grads, _cosine_lr(cfg.learning_rate, step, total_steps))
            step += 1
    return out


def finetune_task(enc: DualEncoder, task_data: TaskData, text_features: EmbeddingTable,
                  cfg: TrainConfig, mask_old: bool = False,
                  start_epoch: int = 0) -> DualEncoder:
    """Fine-tune adapter parameters on one task against frozen text features.

    Performs exactly ``cfg.epochs`` epochs.  The cosine learning-rate curve
    restarts each epoch and batch shuffling is keyed by (seed, epoch index),
    so chaining single-epoch calls with increasing ``start_epoch`` reproduces
    one multi-epoch call bit for bit.  With masking, logits of classes
    outside the task never enter the loss, so they receive zero gradient.
    """
    if not enc.has_adapters:
        raise ValueError("adapters not attached; fine-tuning trains adapters only")
    if cfg.loss_mode == "contrastive_pretrain":
        raise ValueError("finetune_task does not support contrastive pretraining")

    row_of_class = {int(c): i for i, c in enumerate(text_features.labels)}
    missing = sorted(set(int(l) for l in task_data.labels) - set(row_of_class))
    if missing:
        raise ValueError(f"labels {missing} have no text feature row")
    masked = mask_old or cfg.loss_mode == "masked_ce"
    if masked:
        outside = sorted(set(int(l) for l in task_data.labels) - set(task_data.class_ids))
        if outside:
            raise ValueError(f"labels {outside} outside current task under old-class mask")
        allowed = np.array([row_of_class[c] for c in task_data.class_ids], dtype=np.int64)
    else:
        allowed = np.arange(text_features.n_rows, dtype=np.int64)
    label_rows = np.array([row_of_class[int(l)] for l in task_data.labels], dtype=np.int64)
    align = cfg.alignment_weight if cfg.loss_mode == "ce_plus_alignment" else 0.0

    out = enc.copy()
    n = task_data.n
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, _SEED_EPOCH, start_epoch + epoch])
        for step, batch in enumerate(_epoch_batches(n, cfg.batch_size, rng)):
            _, grads = text_ce_loss_and_grads(
                out, task_data.raw[batch], label_rows[batch],
                text_features.vectors, allowed, alignment_weight=align)
            _apply_step(out, grads, _cosine_lr(cfg.learning_rate, step, steps_per_epoch))
    return out


def classify_text(enc: DualEncoder, image_raw, text_features: EmbeddingTable,
                  class_mask: Optional[Iterable[int]] = None) -> np.ndarray:
    """Text-head class probabilities: softmax of scale * cosine to each class text.

    ``class_mask``, when given, is the set of global class ids allowed to
    receive probability mass; all other classes get exactly zero (their
    logits are excluded before the softmax).  Output rows sum to 1.
    """
    x = np.asarray(image_raw, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    u = _embed(enc.image_net, x)
    logits = enc.logit_scale * (u @ text_features.vectors.T)

    if class_mask is not None:
        mask_ids = set(int(c) for c in class_mask)
        keep = np.array([i for i, c in enumerate(text_features.labels)
                         if int(c) in mask_ids], dtype=np.int64)
        if keep.size == 0:
            raise ValueError("no classes left unmasked")
        scores = np.zeros_like(logits)
        scores[:, keep] = _softmax_rows(logits[:, keep])
    else:
        scores = _softmax_rows(logits)
    return scores[0] if single else scores


def text_ce_loss(enc: DualEncoder, task_data: TaskData, text_features: EmbeddingTable,
                 cfg: TrainConfig, mask_old: bool = False) -> float:
    """Loss of the fine-tuning objective on a whole task, without training."""
    row_of_class = {int(c): i for i, c in enumerate(text_features.labels)}
    masked = mask_old or cfg.loss_mode == "masked_ce"
    allowed = (np.array([row_of_class[c] for c in task_data.class_ids], dtype=np.int64)
               if masked else np.arange(text_features.n_rows, dtype=np.int64))
    label_rows = np.array([row_of_class[int(l)] for l in task_data.labels], dtype=np.int64)
    align = cfg.alignment_weight if cfg.loss_mode == "ce_plus_alignment" else 0.0
    loss, _ = text_ce_loss_and_grads(enc, task_data.raw, label_rows,
                                     text_features.vectors, allowed, alignment_weight=align,
                                     train_base=False, train_adapters=enc.has_adapters)
    return loss


def contrastive_loss(enc: DualEncoder, raw_image, raw_text, labels) -> float:
    """Mean contrastive loss over the full pairing, without training."""
    y = np.asarray(labels, dtype=np.int64)
    xt = linalg.as_matrix(raw_text, "raw_text")
    loss, _ = contrastive_loss_and_grads(enc, raw_image, xt[y],
                                         train_base=False, train_scale=False)
    return loss
