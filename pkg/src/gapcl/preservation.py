"""Adaptive gap-preservation controller: probe the first task to pick an epoch
budget, then train every later task for exactly that budget.

The probe computes the negative-pair mean on the untrained model, trains one
epoch at a time, and stops the first time the relative drift reaches the
threshold; the budget is the last epoch still under threshold, clamped to at
least one.  The first task itself continues from the snapshot at the budget
epoch, not from the overshooting probe state, so every task ends up trained
for the same number of epochs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import gapmetrics
from .data import EmbeddingTable, subtable
from .encoder import DualEncoder, TaskData, TrainConfig, embed_images, finetune_task


@dataclass(frozen=True)
class PreservationConfig:
    """Threshold on relative negative-mean drift, plus a probe safety cap."""

    alpha: float = 0.10
    max_probe_epochs: int = 20

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        if self.max_probe_epochs < 1:
            raise ValueError("max_probe_epochs must be >= 1")


@dataclass(frozen=True)
class ProbeRecord:
    epoch: int
    neg: float
    delta: float
    pos: float


@dataclass(frozen=True)
class EpochEstimate:
    """Chosen per-task epoch budget and the probe trace that produced it."""

    epochs: int
    probe_trace: tuple[ProbeRecord, ...]
    capped: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epoch budget must be >= 1")

    def trace_csv(self, include_pos: bool = True) -> str:
        """Probe trace as CSV (epoch, neg, delta[, pos])."""
        header = "epoch,neg,delta,pos" if include_pos else "epoch,neg,delta"
        lines = [header]
        for r in self.probe_trace:
            row = f"{r.epoch},{r.neg!r},{r.delta!r}"
            if include_pos:
                row += f",{r.pos!r}"
            lines.append(row)
        return "\n".join(lines) + "\n"


def _task_gap(enc: DualEncoder, task: TaskData, texts: EmbeddingTable) -> gapmetrics.GapReport:
    task_texts = subtable(texts, task.class_ids)
    pos_of = {int(c): i for i, c in enumerate(task_texts.labels)}
    rows = np.array([pos_of[int(l)] for l in task.labels], dtype=np.int64)
    images = embed_images(enc, task.raw, rows)
    return gapmetrics.measure_gap(images, task_texts)


def _probe(enc: DualEncoder, task: TaskData, texts: EmbeddingTable, alpha: float,
           cap: int, train_cfg: TrainConfig):
    """Probe loop; ``alpha`` unchecked here so boundary values are testable."""
    base = _task_gap(enc, task, texts)
    neg0 = base.neg
    if neg0 == 0.0:
        raise ValueError("reference gap is zero")
    trace = [ProbeRecord(0, base.neg, 0.0, base.pos)]
    one_epoch = replace(train_cfg, epochs=1)

    prev = enc
    cur = enc
    for k in range(1, cap + 1):
        prev = cur
        cur = finetune_task(cur, task, texts, one_epoch, mask_old=True, start_epoch=k - 1)
        report = _task_gap(cur, task, texts)
        delta = gapmetrics.relative_delta(report.neg, neg0)
        trace.append(ProbeRecord(k, report.neg, delta, report.pos))
        if delta >= alpha:
            e = max(k - 1, 1)
            model = cur if e == k else prev
            return EpochEstimate(e, tuple(trace)), model
    return EpochEstimate(cap, tuple(trace), capped=True), cur


def estimate_epochs(enc: DualEncoder, first_task_data: TaskData,
                    text_features: EmbeddingTable, cfg: PreservationConfig,
                    train_cfg: TrainConfig):
    """Estimate the per-task epoch budget on the first task.

    Returns ``(estimate, model)``, where the model is the first-task encoder
    trained for exactly ``estimate.epochs`` epochs.  If the drift never
    reaches alpha within the cap, the estimate is the cap with ``capped``
    set.  The drift is measured on the task's training data against the
    task's own classes, matching the driver's masked fine-tuning view.
    """
    if first_task_data.n == 0:
        raise ValueError("first task data is empty")
    return _probe(enc, first_task_data, text_features, cfg.alpha,
                  cfg.max_probe_epochs, train_cfg)


def train_remaining_tasks(enc: DualEncoder, tasks: list[TaskData],
                          text_features: EmbeddingTable, epochs: int,
                          train_cfg: TrainConfig) -> DualEncoder:
    """Fine-tune each remaining task for exactly the estimated budget."""
    if epochs < 1:
        raise ValueError("epoch budget must be >= 1")
    cfg = replace(train_cfg, epochs=epochs)
    out = enc
    for task in tasks:
        out = finetune_task(out, task, text_features, cfg, mask_old=True)
    return out
