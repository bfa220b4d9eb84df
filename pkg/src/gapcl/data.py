"""Embedding tables, synthetic paired-modality data, and the portable table format.

The synthetic generator places both modalities on the unit sphere as two
"cones": a shared directional component per modality plus a per-class
component living in the orthogonal complement.  The angle between the two
modality directions is solved so the measured inter-modality mean cosine
lands on the requested target, and the per-class component shrinks toward
the degenerate limits (target cosine near +1 or -1) where any spread would
make the target unreachable.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import linalg

MODALITIES = ("image", "text")

FORMAT_MAGIC = b"EMBT"
FORMAT_VERSION = 1

# Weight of the per-class sphere-cap component at target cosine 0.
_CLASS_MIX = 0.55
# Correlation between class anchor directions: classes are variants of a
# shared theme, so any two of them are genuinely confusable under sample
# noise (zero-shot classification stays imperfect, like real data).
_CLASS_ANCHOR_COS = 0.5
# Additive noise on the lifted raw inputs, so encoders have to denoise.
_RAW_NOISE = 0.05

_SEED_SYNTH = 101
_SEED_SPLIT = 202


class TableFormatError(ValueError):
    """Raised when an embedding-table file violates the binary format."""


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    """Labeled matrix of unit-norm feature vectors for one modality."""

    vectors: np.ndarray
    labels: np.ndarray
    modality: str
    class_names: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        v = linalg.as_matrix(self.vectors, "vectors")
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1 or labels.shape[0] != v.shape[0]:
            raise ValueError("labels must be one class index per row")
        if labels.size and labels.min() < 0:
            raise ValueError("labels must be non-negative")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}")
        norms = np.linalg.norm(v, axis=1)
        err = np.max(np.abs(norms - 1.0))
        if err > 1e-6:
            raise ValueError(f"rows must be unit norm (max deviation {err:.3e})")
        if self.class_names is not None:
            names = tuple(self.class_names)
            if labels.size and labels.max() >= len(names):
                raise ValueError("label exceeds class_names length")
            object.__setattr__(self, "class_names", names)
        v = v.copy()
        labels = labels.copy()
        v.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "labels", labels)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def n_rows(self) -> int:
        return self.vectors.shape[0]

    @property
    def num_classes(self) -> int:
        if self.class_names is not None:
            return len(self.class_names)
        return int(self.labels.max()) + 1 if self.labels.size else 0


def make_table(vectors, labels, modality: str, class_names=None) -> EmbeddingTable:
    """Normalize rows, quantize to float32 storage precision, and build a table.

    Quantizing at creation makes write/read round trips bit-exact: the file
    format stores 32-bit floats, so tables hold values that survive the cast.
    """
    v = linalg.normalize_rows(np.asarray(vectors, dtype=np.float64))
    v = v.astype(np.float32).astype(np.float64)
    return EmbeddingTable(v, labels, modality, class_names)


def subtable(table: EmbeddingTable, class_ids: Sequence[int]) -> EmbeddingTable:
    """Rows of a text table for the given classes, in the given order.

    The returned table's labels keep the global class indices.
    """
    ids = [int(c) for c in class_ids]
    row_of = {int(lbl): i for i, lbl in enumerate(table.labels)}
    missing = [c for c in ids if c not in row_of]
    if missing:
        raise ValueError(f"classes {missing} not present in table")
    rows = [row_of[c] for c in ids]
    return EmbeddingTable(table.vectors[rows], np.array(ids, dtype=np.int64),
                          table.modality, table.class_names)


@dataclass(frozen=True)
class SyntheticConfig:
    """Geometry knobs for the paired-modality generator."""

    num_classes: int
    samples_per_class: int
    raw_dim: int
    cone_separation: float
    intra_class_spread: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if self.raw_dim < self.num_classes:
            raise ValueError("raw_dim must be >= num_classes")
        if not 0.0 <= self.cone_separation <= 2.0:
            raise ValueError("cone_separation must be in [0, 2]")
        if self.intra_class_spread <= 0.0:
            raise ValueError("intra_class_spread must be > 0")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def embed_dim(self) -> int:
        # Reference embeddings live in a lower-dimensional space than the raw
        # inputs so the lift is genuinely overcomplete.
        return max(4, self.raw_dim // 2)


@dataclass(frozen=True)
class TaskSplit:
    """Ordered disjoint class sets, one per sequential task."""

    task_class_lists: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        seen: set[int] = set()
        for classes in self.task_class_lists:
            ids = set(classes)
            if len(ids) != len(classes):
                raise ValueError("duplicate class inside a task")
            if ids & seen:
                raise ValueError("tasks must be pairwise disjoint")
            seen |= ids
        object.__setattr__(
            self, "task_class_lists", tuple(tuple(int(c) for c in t) for t in self.task_class_lists)
        )

    @property
    def num_tasks(self) -> int:
        return len(self.task_class_lists)

    @property
    def all_classes(self) -> frozenset[int]:
        return frozenset(c for t in self.task_class_lists for c in t)


def _complement_part(rng, dim, u, w):
    """Random unit vector in the orthogonal complement of span(u, w)."""
    g = rng.standard_normal(dim)
    g -= np.dot(g, u) * u
    g -= np.dot(g, w) * w
    n = np.linalg.norm(g)
    if n < 1e-12:
        raise ValueError("degenerate complement sample")
    return g / n


def generate_synthetic(cfg: SyntheticConfig):
    """Build paired image/text data with a controllable modality gap.

    Returns ``(image_table, text_table, raw_image_inputs, raw_text_inputs)``.
    The tables are the reference embeddings (unit sphere); the raw inputs are
    noisy linear lifts of them in ``raw_dim`` dimensions for encoders to
    consume.  Raw text inputs have one row per class, raw image inputs one
    row per sample, both aligned with the tables' label order.
    """
    d = cfg.embed_dim
    if d < 4 or cfg.num_classes > d - 3:
        raise ValueError("infeasible geometry: raw_dim too small to embed separated cones")
    rng = np.random.default_rng([cfg.seed, _SEED_SYNTH])

    target = 1.0 - cfg.cone_separation
    # Spread must vanish at the antipodal/coincident limits or the target
    # mean cosine is unreachable (see module docstring).
    shape = float(np.sqrt(max(0.0, 1.0 - target * target)))
    beta = _CLASS_MIX * shape
    alpha = float(np.sqrt(1.0 - beta * beta))
    eps = cfg.intra_class_spread
    noise_shrink = 1.0 / np.sqrt(1.0 + eps * eps)

    # Solve the pole-to-pole cosine so the overall inter-modality mean hits
    # the target.  The class components contribute noise_shrink for the one
    # matching class and anchor-correlation times that for the K-1 others.
    k = cfg.num_classes
    class_term = beta * beta * noise_shrink * (1.0 + (k - 1) * _CLASS_ANCHOR_COS) / k
    g = (target - class_term) / (alpha * alpha)
    g = float(np.clip(g, -1.0, 1.0))

    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)
    w = rng.standard_normal(d)
    w -= np.dot(w, u) * u
    w /= np.linalg.norm(w)
    image_pole = g * u + np.sqrt(max(0.0, 1.0 - g * g)) * w

    # Equiangular class anchors: a shared theme direction plus exactly
    # orthonormal per-class directions, so every class pair sits at the same
    # anchor correlation and no task pairing is accidentally trivial.
    class_pole = _complement_part(rng, d, u, w)
    own = rng.standard_normal((d, k))
    for basis_vec in (u, w, class_pole):
        own -= basis_vec[:, None] * (basis_vec @ own)
    own = np.linalg.qr(own)[0]
    mix_shared = np.sqrt(_CLASS_ANCHOR_COS)
    mix_own = np.sqrt(1.0 - _CLASS_ANCHOR_COS)
    class_dirs = mix_shared * class_pole[None, :] + mix_own * own.T
    text_vecs = alpha * u[None, :] + beta * class_dirs

    n = k * cfg.samples_per_class
    image_vecs = np.empty((n, d))
    labels = np.empty(n, dtype=np.int64)
    row = 0
    for c in range(k):
        for _ in range(cfg.samples_per_class):
            eta = _complement_part(rng, d, u, w)
            z = class_dirs[c] + eps * eta
            z /= np.linalg.norm(z)
            image_vecs[row] = alpha * image_pole + beta * z
            labels[row] = c
            row += 1

    names = tuple(f"class_{c:03d}" for c in range(k))
    image_table = make_table(image_vecs, labels, "image", names)
    text_table = make_table(text_vecs, np.arange(k, dtype=np.int64), "text", names)

    # Raw inputs: orthonormal lift to raw_dim plus isotropic noise.
    lift_img = np.linalg.qr(rng.standard_normal((cfg.raw_dim, d)))[0]
    lift_txt = np.linalg.qr(rng.standard_normal((cfg.raw_dim, d)))[0]
    raw_image = image_table.vectors @ lift_img.T + _RAW_NOISE * rng.standard_normal((n, cfg.raw_dim))
    raw_text = text_table.vectors @ lift_txt.T + _RAW_NOISE * rng.standard_normal((k, cfg.raw_dim))

    return image_table, text_table, raw_image, raw_text


def split_tasks(num_classes: int, num_tasks: int, seed: int) -> TaskSplit:
    """Shuffle classes by seed and cut them into near-equal disjoint tasks.

    When ``num_tasks`` does not divide ``num_classes`` the remainder classes
    go to the earliest tasks.
    """
    if num_classes < 1 or num_tasks < 1:
        raise ValueError("num_classes and num_tasks must be positive")
    if num_tasks > num_classes:
        raise ValueError("num_tasks cannot exceed num_classes")
    rng = np.random.default_rng([seed, _SEED_SPLIT])
    order = rng.permutation(num_classes)
    base, extra = divmod(num_classes, num_tasks)
    tasks = []
    start = 0
    for t in range(num_tasks):
        size = base + (1 if t < extra else 0)
        tasks.append(tuple(int(c) for c in order[start:start + size]))
        start += size
    return TaskSplit(tuple(tasks))


def _sidecar_path(path: str) -> str:
    return os.path.splitext(str(path))[0] + ".meta.json"


def write_table(table: EmbeddingTable, path) -> None:
    """Write a table in the shared binary format (atomically).

    Layout: magic ``EMBT``, version u32 LE, modality u8 (0=image, 1=text),
    row count u64 LE, dim u32 LE; then float32 LE row-major payload; then one
    u32 LE label per row.  ``class_names`` goes to a JSON sidecar.
    """
    path = str(path)
    payload = table.vectors.astype("<f4")
    if not np.all(np.isfinite(payload)):
        raise TableFormatError("non-finite entries in table payload")
    if table.labels.size and table.labels.max() >= 2 ** 32:
        raise TableFormatError("label does not fit in u32")
    header = FORMAT_MAGIC + struct.pack(
        "<IBQI", FORMAT_VERSION, MODALITIES.index(table.modality),
        table.n_rows, table.dim,
    )
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(payload.tobytes(order="C"))
        f.write(table.labels.astype("<u4").tobytes())
    os.replace(tmp, path)
    if table.class_names is not None:
        meta_tmp = _sidecar_path(path) + ".tmp"
        with open(meta_tmp, "w", encoding="utf-8") as f:
            json.dump({"class_names": list(table.class_names)}, f, indent=2)
            f.write("\n")
        os.replace(meta_tmp, _sidecar_path(path))


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TableFormatError("unexpected end of data")
    return buf


def read_table(path, expect_dim: Optional[int] = None,
               expect_modality: Optional[str] = None) -> EmbeddingTable:
    """Read a table file, validating header, payload, and row norms.

    Rows are promoted to float64.  Rejects non-finite entries and rows whose
    norm deviates from 1 by more than 1e-4.
    """
    path = str(path)
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != FORMAT_MAGIC:
            raise TableFormatError(f"header mismatch: bad magic {magic!r}")
        version, modality_tag, rows, dim = struct.unpack("<IBQI", _read_exact(f, 17))
        if version != FORMAT_VERSION:
            raise TableFormatError(f"header mismatch: unsupported version {version}")
        if modality_tag >= len(MODALITIES):
            raise TableFormatError(f"header mismatch: unknown modality tag {modality_tag}")
        if rows == 0 or dim == 0:
            raise TableFormatError("header mismatch: empty table")
        modality = MODALITIES[modality_tag]
        if expect_modality is not None and modality != expect_modality:
            raise TableFormatError(f"modality mismatch: file has {modality!r}")
        if expect_dim is not None and dim != expect_dim:
            raise TableFormatError(f"dimension mismatch: file has dim {dim}, expected {expect_dim}")
        payload = _read_exact(f, rows * dim * 4)
        label_bytes = _read_exact(f, rows * 4)
        if f.read(1):
            raise TableFormatError("trailing bytes after footer")
    vectors = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(rows, dim)
    if not np.all(np.isfinite(vectors)):
        raise TableFormatError("non-finite entries in payload")
    norms = np.linalg.norm(vectors, axis=1)
    err = np.max(np.abs(norms - 1.0))
    if err > 1e-4:
        raise TableFormatError(f"row norm outside tolerance (max deviation {err:.3e})")
    labels = np.frombuffer(label_bytes, dtype="<u4").astype(np.int64)
    class_names = None
    sidecar = _sidecar_path(path)
    if os.path.exists(sidecar):
        with open(sidecar, "r", encoding="utf-8") as f:
            meta = json.load(f)
        if "class_names" in meta:
            class_names = tuple(str(s) for s in meta["class_names"])
    return EmbeddingTable(vectors, labels, modality, class_names)
