"""Per-task glue: model dimensions, batching, constraint losses and metrics."""

from __future__ import annotations

import math

import numpy as np

from . import constraints, csp
from .data import NA, sp_graph
from .errors import ConfigError


class Task:
    name = None
    embedder = "lookup"
    adjacency = None

    def model_dims(self):
        return {"t": self.t, "v": self.v, "c": self.c, "embedder": self.embedder}

    def batch(self, instances):
        tokens = np.stack([inst.tokens for inst in instances])
        labels = np.stack([inst.labels for inst in instances])
        return tokens, labels

    def output_loss(self, instances):
        """Return ``X -> loss`` for the batch, or ``None`` when the task has none."""
        return None

    def metrics(self, pred, instances):
        raise NotImplementedError


def _rate(hits, total):
    return float(hits) / total if total else None


class SudokuTask(Task):
    def __init__(self, n):
        self.n = n
        side = n * n
        self.name = f"sudoku{side}"
        self.t, self.v, self.c = side * side, side + 1, side
        self.layout = csp.sudoku_layout(n)
        self.adjacency = self.layout.adjacency

    def output_loss(self, instances):
        return lambda X: constraints.loss_sudoku(X, self.layout)

    def metrics(self, pred, instances):
        tokens, labels = self.batch(instances)
        known = labels != NA
        correct = (pred == labels) | ~known
        empty = tokens == 0
        given = ~empty
        return {
            "whole_board_acc": _rate(np.all(correct, axis=1).sum(), len(instances)),
            "solution_board_acc": _rate(np.all(correct | given, axis=1).sum(), len(instances)),
            "cell_acc": _rate(((pred == labels) & known).sum(), known.sum()),
            "givens_cell_acc": _rate(((pred == tokens - 1) & given).sum(), given.sum()),
            "constraint_acc": {},
        }


class ShortestPathTask(Task):
    name = "sp"

    def __init__(self, grid_order=4):
        self.k = grid_order
        self.m = grid_order * grid_order
        self.n = 2 * grid_order * (grid_order - 1)
        self.t, self.v, self.c = self.m + self.n, 4, 2
        self.incidence = csp.incidence_matrix(grid_order)

    def output_loss(self, instances):
        # the degree-2 mask is label-derived, so unlabeled graphs are skipped
        rows = [i for i, inst in enumerate(instances) if inst.labeled]
        if not rows:
            return None
        ends = [instances[i].meta["endpoints"] for i in rows]
        labels = [instances[i].meta["label_edges"] for i in rows]
        scale = len(rows) / len(instances)

        def loss(X):
            Xl = X if len(rows) == len(instances) else X[np.asarray(rows)]
            return constraints.loss_path(Xl, self.incidence, ends, labels) * scale

        return loss

    def metrics(self, pred, instances):
        tokens, labels = self.batch(instances)
        edge_pred = pred[:, self.m:]
        edge_lab = labels[:, self.m:]
        counts = {"path_valid": 0, "no_removed_edges": 0, "shortest_path": 0}
        for inst, row in zip(instances, edge_pred):
            graph = sp_graph(inst)
            report = csp.path_report(graph, np.flatnonzero(row == 1), len(inst.meta["label_edges"]))
            for key, ok in report.items():
                counts[key] += bool(ok)
        whole = np.all(edge_pred == edge_lab, axis=1).sum()
        return {
            "whole_board_acc": _rate(whole, len(instances)),
            "solution_board_acc": _rate(whole, len(instances)),
            "cell_acc": _rate((edge_pred == edge_lab).sum(), edge_lab.size),
            "givens_cell_acc": None,
            "constraint_acc": {k: _rate(v, len(instances)) for k, v in counts.items()},
        }


class NonogramTask(Task):
    name = "nonogram"
    embedder = "linear"

    def __init__(self, size, max_runs=None):
        self.size = size
        self.max_runs = max_runs or (size + 1) // 2
        self.t, self.v, self.c = size * size, 2 * self.max_runs, 2

    def metrics(self, pred, instances):
        _, labels = self.batch(instances)
        valid = 0
        for inst, row in zip(instances, pred):
            grid = row.reshape(self.size, self.size)
            valid += csp.nonogram_check(grid, inst.meta["rows"], inst.meta["cols"])
        return {
            "whole_board_acc": _rate(np.all(pred == labels, axis=1).sum(), len(instances)),
            "solution_board_acc": _rate(np.all(pred == labels, axis=1).sum(), len(instances)),
            "cell_acc": _rate((pred == labels).sum(), labels.size),
            "givens_cell_acc": None,
            "constraint_acc": {"nonogram_valid": _rate(valid, len(instances))},
        }


def task_for(instances_or_name):
    """Build the task adapter from a task name or a non-empty instance list."""
    if isinstance(instances_or_name, str):
        name, first = instances_or_name, None
    else:
        first = instances_or_name[0]
        name = first.task
    if name.startswith("sudoku"):
        side = int(name[len("sudoku"):])
        n = math.isqrt(side)
        if n * n != side:
            raise ConfigError(f"unknown task {name!r}")
        return SudokuTask(n)
    if name == "sp":
        return ShortestPathTask(first.meta["grid_n"] if first else 4)
    if name == "nonogram":
        if first is None:
            return NonogramTask(7)
        return NonogramTask(first.meta["size"], first.tokens.shape[1] // 2)
    raise ConfigError(f"unknown task {name!r}")
