"""Differentiable cardinality-constraint losses.

Every loss counts true atoms on a binarized copy of its input
(``x >= 0.5``); the identity straight-through estimator lets the count carry
a gradient back to ``x``. Inputs may carry leading batch axes; batched losses
are averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError

binarize_ste = T.binarize_ste


@dataclass(frozen=True)
class ConstraintWeights:
    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")


def count_true(x, axis=-1):
    return binarize_ste(x).sum(axis=axis)


def loss_card_exact(x, n):
    """``(c(x) - n)^2`` per vector along the last axis."""
    if n < 0:
        raise ConfigError(f"cardinality target {n} is negative")
    return T.square(count_true(x) - float(n))


def loss_card_range(x, lower, upper):
    """Zero inside ``[lower, upper]``, squared distance to the bound outside."""
    if lower > upper:
        raise ConfigError(f"lower bound {lower} exceeds upper bound {upper}")
    if lower < 0:
        raise ConfigError(f"lower bound {lower} is negative")
    c = count_true(x)
    # c is integral, so relu()^2 reproduces the two indicator branches exactly
    return T.square(T.relu(float(lower) - c)) + T.square(T.relu(c - float(upper)))


def loss_sudoku(X, layout):
    """Exactly one of each digit in every row, column and box.

    ``X`` is ``(t, c)`` or ``(batch, t, c)``; returns the per-board sum of
    ``3 * side * side`` squared count errors, averaged over the batch.
    """
    batched = X.ndim == 3
    if not batched:
        X = X.reshape((1,) + X.shape)
    idx = layout.index_array
    side = idx.shape[1]
    if X.shape[1] != layout.t or X.shape[2] != side:
        raise DimensionError(f"output shape {X.shape[1:]} does not fit a layout with t={layout.t}")
    grouped = T.take(X, idx, axis=1)  # (B, groups, side, c)
    counts = count_true(grouped, axis=2)  # (B, groups, c)
    per_board = T.square(counts - 1.0).sum(axis=(1, 2))
    return per_board.mean()


def attention_mass(A, M):
    """Share of attention each position places on its adjacent positions."""
    return (A * np.asarray(M, dtype=A.dtype)).sum(axis=-1)


def loss_attention(A, M):
    """Every position should put most of its attention on adjacent positions.

    ``A`` is ``(..., heads, t, t)``; the exact-count loss with target ``t`` is
    taken per head, averaged over heads and any leading batch axes.
    """
    M = np.asarray(M)
    t = A.shape[-1]
    if A.shape[-2:] != (t, t) or M.shape != (t, t):
        raise DimensionError(f"attention shape {A.shape} vs adjacency {M.shape}")
    return loss_card_exact(attention_mass(A, M), t).mean()


def path_targets(incidence, endpoints, label_edges):
    """Per-node target degree (1 at ends, 2 on the labelled path) and node mask."""
    incidence = np.asarray(incidence)
    m, n = incidence.shape
    label = np.zeros(n, dtype=np.int64)
    label[np.asarray(label_edges, dtype=np.int64)] = 1
    on_path = incidence @ label
    target = np.where(on_path > 0, 2.0, 0.0)
    mask = (on_path > 0).astype(np.float64)
    for e in endpoints:
        if not 0 <= e < m:
            raise DataError(f"endpoint {e} not a node of the graph")
        target[e] = 1.0
        mask[e] = 1.0
    return target, mask


def loss_path(X, incidence, endpoints, label_edges):
    """End nodes touch one selected edge, other labelled-path nodes two.

    ``X`` is the ``(m + n, 2)`` output (or ``(batch, m + n, 2)``); column 1 is
    the probability that an edge is in the path. ``endpoints`` and
    ``label_edges`` are per instance (lists of them when batched).
    """
    incidence = np.asarray(incidence)
    m, n = incidence.shape
    batched = X.ndim == 3
    if not batched:
        X = X.reshape((1,) + X.shape)
        endpoints, label_edges = [endpoints], [label_edges]
    if X.shape[1] != m + n:
        raise DimensionError(f"output has {X.shape[1]} positions, graph has {m + n}")
    targets, masks = zip(*(path_targets(incidence, e, l) for e, l in zip(endpoints, label_edges)))
    target = np.asarray(targets, dtype=X.dtype)
    mask = np.asarray(masks, dtype=X.dtype)
    v = X[:, m:, 1]  # (B, n)
    # B(M_i * v) == M_i * B(v) for 0/1 incidence rows
    degree = binarize_ste(v) @ incidence.T.astype(X.dtype)  # (B, m)
    per_graph = (T.square(degree - target) * mask).sum(axis=1)
    return per_graph.mean()


@dataclass
class LossTerms:
    total: T.Tensor
    base: T.Tensor
    constraint: T.Tensor


def loss_terms(
    trace,
    labels,
    weights=ConstraintWeights(),
    loss_placement="all",
    output_loss=None,
    adjacency=None,
):
    """Base cross-entropy and constraint losses accumulated over a trace.

    ``output_loss(X)`` is the task's output constraint (weighted by alpha);
    ``adjacency`` enables the attention constraint (weighted by beta). The
    cross-entropy of each board is summed over positions and averaged over
    the batch; ``loss_placement="last"`` keeps only the final trace entry for
    the base term.
    """
    if not trace.entries:
        raise DataError("empty forward trace")
    if loss_placement not in ("all", "last"):
        raise ConfigError(f"unknown loss placement {loss_placement!r}")
    labels = np.asarray(labels)
    batch = labels.shape[0] if labels.ndim == 2 else 1
    entries = trace.entries if loss_placement == "all" else trace.entries[-1:]
    base = None
    for e in entries:
        ce = T.cross_entropy_masked(e.X, labels) * (1.0 / batch)
        base = ce if base is None else base + ce
    constraint = T.Tensor(np.zeros((), dtype=base.dtype))
    for e in trace.entries:
        if weights.alpha and output_loss is not None:
            constraint = constraint + output_loss(e.X) * weights.alpha
        if weights.beta and adjacency is not None:
            constraint = constraint + loss_attention(e.A, adjacency) * weights.beta
    return LossTerms(base + constraint, base, constraint)


def total_loss(trace, labels, layout=None, weights=ConstraintWeights(), loss_placement="all",
               output_loss=None, adjacency=None):
    """``L_base + sum over the trace of (alpha * output loss + beta * attention loss)``.

    With a Sudoku ``layout`` the output loss defaults to :func:`loss_sudoku`
    and the attention adjacency to the layout's row/column/box matrix.
    """
    if layout is not None:
        if output_loss is None:
            output_loss = lambda X: loss_sudoku(X, layout)  # noqa: E731
        if adjacency is None:
            adjacency = layout.adjacency
    return loss_terms(trace, labels, weights, loss_placement, output_loss, adjacency).total
