"""Class-conditional feature alignment between two weight streams.

For each class present in a batch, compare the mean of the auxiliary-weight
FC outputs against the mean of the task-weight FC outputs on the same rows,
and sum the squared Euclidean distances. A linear-kernel mean embedding:
closed form, differentiable, zero exactly when the per-class means coincide.
Classes absent from the batch are skipped (their mean is undefined).
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, add
from .errors import ShapeError


def class_means(features: np.ndarray, labels: np.ndarray, num_classes: int) -> dict:
    """Per-class arithmetic means of feature rows: {class: (mean, count)}.

    Classes with no rows in the batch are absent from the result.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or labels.shape != (features.shape[0],):
        raise ShapeError(
            f"class_means: features {features.shape} incompatible with labels {labels.shape}"
        )
    if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
        raise ShapeError(f"class_means: label outside [0, {num_classes})")
    out = {}
    for c in range(num_classes):
        rows = labels == c
        k = int(rows.sum())
        if k:
            out[c] = (features[rows].mean(axis=0), k)
    return out


def cmmd(aux_stream: Tensor, task_stream: Tensor, labels: np.ndarray) -> Tensor:
    """Sum over present classes of ||mean(aux rows) - mean(task rows)||^2.

    Both streams hold the same batch rows (n, d), differing only in the FC
    weights that produced them. Gradient w.r.t. a row i of class c is
    +-(2/k_c) * (mean_aux_c - mean_task_c); rows of absent classes get zero.
    """
    if aux_stream.shape != task_stream.shape or aux_stream.ndim != 2:
        raise ShapeError(
            f"cmmd: streams must be equal 2-d shapes, got {aux_stream.shape} and {task_stream.shape}"
        )
    labels = np.asarray(labels)
    if labels.shape != (aux_stream.shape[0],):
        raise ShapeError(f"cmmd: labels shape {labels.shape} does not match {aux_stream.shape[0]} rows")

    n, d = aux_stream.shape
    # Per-row coefficient (2 / k_class) and per-row mean difference, assembled
    # once so both forward value and backward scatter are vectorized.
    diff_rows = np.zeros((n, d))
    coeff = np.zeros((n, 1))
    value = 0.0
    for c in np.unique(labels):
        rows = labels == c
        k = int(rows.sum())
        delta = aux_stream.data[rows].mean(axis=0) - task_stream.data[rows].mean(axis=0)
        value += float(delta @ delta)
        diff_rows[rows] = delta
        coeff[rows, 0] = 2.0 / k

    out = Tensor(value, (aux_stream, task_stream))

    def _bw(g):
        scatter = g * coeff * diff_rows
        aux_stream._accumulate(scatter)
        task_stream._accumulate(-scatter)

    out._backward_fn = _bw
    return out


def alignment_total(aux_streams, task_streams, labels: np.ndarray) -> Tensor:
    """Sum of cmmd over the aligned hidden FC layers."""
    if len(aux_streams) != len(task_streams) or not aux_streams:
        raise ShapeError("alignment_total: need one aux stream per task stream")
    total = cmmd(aux_streams[0], task_streams[0], labels)
    for a, t in zip(aux_streams[1:], task_streams[1:]):
        total = add(total, cmmd(a, t, labels))
    return total
