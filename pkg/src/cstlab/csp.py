"""Symbolic CSP ground truth: data model, checkers and exhaustive solvers.

Values are 1-based throughout this module (variable ``i`` takes a value in
``1..domains[i]``). Boolean tasks use 1 for false and 2 for true.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from itertools import product

import numpy as np

from .errors import DataError, ResourceError

FALSE, TRUE = 1, 2
DEFAULT_CAP = 10**7


@dataclass(frozen=True)
class CardinalityConstraint:
    """``lower <= |{atoms that hold}| <= upper`` over ``(variable, value)`` atoms."""

    atoms: tuple
    lower: int
    upper: int
    tag: object = None

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple(tuple(a) for a in self.atoms))
        if not 0 <= self.lower <= self.upper <= len(self.atoms):
            raise DataError(
                f"bounds {self.lower}..{self.upper} invalid for {len(self.atoms)} atoms"
            )

    @classmethod
    def exactly(cls, atoms, n, tag=None):
        return cls(tuple(atoms), n, n, tag)

    def count(self, assignment):
        return sum(1 for var, val in self.atoms if assignment[var] == val)

    def holds(self, assignment):
        return self.lower <= self.count(assignment) <= self.upper


@dataclass
class CspInstance:
    domains: list
    constraints: list = field(default_factory=list)

    def __post_init__(self):
        self.domains = [int(c) for c in self.domains]
        if any(c < 1 for c in self.domains):
            raise DataError("every domain needs at least one value")
        t = len(self.domains)
        for con in self.constraints:
            for var, val in con.atoms:
                if not (0 <= var < t and 1 <= val <= self.domains[var]):
                    raise DataError(f"atom ({var}, {val}) outside the instance")

    @property
    def t(self):
        return len(self.domains)


@dataclass(frozen=True)
class Violation:
    constraint: CardinalityConstraint
    count: int


def check_assignment(instance, assignment):
    """Return every violated constraint together with its achieved count."""
    assignment = [int(a) for a in assignment]
    if len(assignment) != instance.t:
        raise DataError(f"assignment has {len(assignment)} values, instance has {instance.t}")
    for i, (a, c) in enumerate(zip(assignment, instance.domains)):
        if not 1 <= a <= c:
            raise DataError(f"variable {i}: value {a} outside domain 1..{c}")
    out = []
    for con in instance.constraints:
        n = con.count(assignment)
        if not con.lower <= n <= con.upper:
            out.append(Violation(con, n))
    return out


# ---------------------------------------------------------------------------
# exhaustive solver


class _Search:
    def __init__(self, instance, limit, cap, order):
        self.inst = instance
        self.limit = limit
        self.cap = cap
        self.order = order
        self.expansions = 0
        self.solutions = []
        t = instance.t
        self.cons = instance.constraints
        # watch[var][val] -> constraint ids containing that atom
        self.watch = [[[] for _ in range(c + 1)] for c in instance.domains]
        self.by_var = [set() for _ in range(t)]
        for k, con in enumerate(self.cons):
            for var, val in con.atoms:
                self.watch[var][val].append(k)
                self.by_var[var].add(k)
        self.full = [((1 << (c + 1)) - 2) for c in instance.domains]

    def run(self):
        t = self.inst.t
        doms = list(self.full)
        counts = [0] * len(self.cons)
        assign = [0] * t
        for k, con in enumerate(self.cons):
            if con.upper == 0:
                for var, val in con.atoms:
                    doms[var] &= ~(1 << val)
        if any(d == 0 for d in doms):
            return []
        if not all(self._lower_ok(k, doms, assign, counts) for k in range(len(self.cons))):
            return []
        self._dfs(doms, counts, assign, 0)
        return self.solutions

    def _possible(self, k, doms, assign):
        n = 0
        for var, val in self.cons[k].atoms:
            if assign[var] == 0 and doms[var] >> val & 1:
                n += 1
        return n

    def _lower_ok(self, k, doms, assign, counts):
        return counts[k] + self._possible(k, doms, assign) >= self.cons[k].lower

    def _pick(self, doms, assign, depth):
        if self.order == "lex":
            return depth if depth < len(assign) else None
        best, best_n = None, None
        for i, a in enumerate(assign):
            if a == 0:
                n = bin(doms[i]).count("1")
                if best_n is None or n < best_n:
                    best, best_n = i, n
                    if n <= 1:
                        break
        return best

    def _dfs(self, doms, counts, assign, depth):
        if self.limit is not None and len(self.solutions) >= self.limit:
            return
        var = self._pick(doms, assign, depth)
        if var is None:
            if all(c.lower <= counts[k] <= c.upper for k, c in enumerate(self.cons)):
                self.solutions.append([int(a) for a in assign])
            return
        dom = doms[var]
        for val in range(1, self.inst.domains[var] + 1):
            if not dom >> val & 1:
                continue
            self.expansions += 1
            if self.expansions > self.cap:
                raise ResourceError(f"search exceeded {self.cap} node expansions")
            new_doms = list(doms)
            new_doms[var] = 1 << val
            new_counts = list(counts)
            assign[var] = val
            if self._propagate(var, val, new_doms, new_counts, assign):
                self._dfs(new_doms, new_counts, assign, depth + 1)
            assign[var] = 0
            if self.limit is not None and len(self.solutions) >= self.limit:
                return

    def _propagate(self, var, val, doms, counts, assign):
        touched = set(self.by_var[var])
        for k in self.watch[var][val]:
            counts[k] += 1
            con = self.cons[k]
            if counts[k] > con.upper:
                return False
            if counts[k] == con.upper:
                for v2, x2 in con.atoms:
                    if assign[v2] == 0 and doms[v2] >> x2 & 1:
                        doms[v2] &= ~(1 << x2)
                        if doms[v2] == 0:
                            return False
                        touched |= self.by_var[v2]
        for k in touched:
            if not self._lower_ok(k, doms, assign, counts):
                return False
        return True


def brute_force_solve(instance, limit=None, cap=DEFAULT_CAP, order="lex"):
    """Enumerate solutions by backtracking with forward checking.

    With ``order="lex"`` variables are branched in index order and values in
    ascending order, so solutions come out lexicographically sorted.
    ``order="mrv"`` picks the smallest remaining domain first (faster; the
    order of solutions is then unspecified). ``cap`` bounds node expansions.
    """
    return _Search(instance, limit, cap, order).run()


# ---------------------------------------------------------------------------
# Sudoku


@dataclass(frozen=True)
class GroupLayout:
    """Groups of variable indices that share an all-different structure."""

    groups: tuple  # of (kind, tuple of indices)
    t: int

    @cached_property
    def index_array(self):
        return np.array([idx for _, idx in self.groups], dtype=np.int64)

    @cached_property
    def adjacency(self):
        m = np.zeros((self.t, self.t), dtype=np.int8)
        for _, idx in self.groups:
            ix = np.array(idx)
            m[np.ix_(ix, ix)] = 1
        np.fill_diagonal(m, 1)
        return m


def sudoku_layout(n):
    """Row, column and box groups of an ``n^2 x n^2`` board (box order ``n``)."""
    if n < 2:
        raise DataError("box order must be at least 2")
    side = n * n
    groups = []
    for r in range(side):
        groups.append(("row", tuple(r * side + c for c in range(side))))
    for c in range(side):
        groups.append(("col", tuple(r * side + c for r in range(side))))
    for br in range(n):
        for bc in range(n):
            cells = tuple(
                (br * n + i) * side + bc * n + j for i in range(n) for j in range(n)
            )
            groups.append(("box", cells))
    return GroupLayout(tuple(groups), side * side)


def sudoku_csp(n, puzzle=None):
    """Cardinality encoding of Sudoku: each digit exactly once per group.

    Given digits of ``puzzle`` (0 = empty) become singleton constraints.
    """
    layout = sudoku_layout(n)
    side = n * n
    cons = []
    for gi, (kind, idx) in enumerate(layout.groups):
        for d in range(1, side + 1):
            cons.append(CardinalityConstraint.exactly([(i, d) for i in idx], 1, (kind, gi, d)))
    if puzzle is not None:
        for i, g in enumerate(puzzle):
            if g:
                cons.append(CardinalityConstraint.exactly([(i, int(g))], 1, ("given", i, int(g))))
    return CspInstance([side] * (side * side), cons)


# ---------------------------------------------------------------------------
# grid graphs and shortest paths


def grid_edges(k):
    """Edges of a ``k x k`` grid as ``(u, v)`` node pairs.

    Nodes are numbered row-major; for each node the edge to its right
    neighbour comes before the edge to the node below.
    """
    edges = []
    for r in range(k):
        for c in range(k):
            u = r * k + c
            if c + 1 < k:
                edges.append((u, u + 1))
            if r + 1 < k:
                edges.append((u, u + k))
    return tuple(edges)


@dataclass(frozen=True)
class GridGraph:
    order: int
    removed: frozenset
    endpoints: tuple

    def __post_init__(self):
        object.__setattr__(self, "removed", frozenset(int(e) for e in self.removed))
        object.__setattr__(self, "endpoints", tuple(int(e) for e in self.endpoints))
        if self.order < 2:
            raise DataError("grid order must be at least 2")
        a, b = self.endpoints
        if a == b or not (0 <= a < self.m and 0 <= b < self.m):
            raise DataError(f"endpoints {self.endpoints} must be distinct nodes of the grid")
        if any(not 0 <= e < self.n for e in self.removed):
            raise DataError("removed edge index out of range")
        if len(self.removed) != self.n // 3:
            raise DataError(f"expected {self.n // 3} removed edges, got {len(self.removed)}")

    @property
    def m(self):
        return self.order * self.order

    @property
    def n(self):
        return 2 * self.order * (self.order - 1)

    @property
    def edges(self):
        return grid_edges(self.order)

    @property
    def present(self):
        return tuple(e for e in range(self.n) if e not in self.removed)

    @property
    def incidence(self):
        return incidence_matrix(self.order)

    def adjacency_lists(self, include_removed=False):
        adj = [[] for _ in range(self.m)]
        for e, (u, v) in enumerate(self.edges):
            if include_removed or e not in self.removed:
                adj[u].append((v, e))
                adj[v].append((u, e))
        return adj


_INCIDENCE = {}


def incidence_matrix(k):
    """Node-edge incidence matrix of the full ``k x k`` grid, shape ``(m, n)``."""
    if k not in _INCIDENCE:
        edges = grid_edges(k)
        mat = np.zeros((k * k, len(edges)), dtype=np.int8)
        for e, (u, v) in enumerate(edges):
            mat[u, e] = mat[v, e] = 1
        mat.flags.writeable = False
        _INCIDENCE[k] = mat
    return _INCIDENCE[k]


@dataclass(frozen=True)
class PathResult:
    edges: tuple
    length: int
    unique: bool


def bfs_shortest_path(graph):
    """Shortest endpoint-to-endpoint path over the present edges.

    Returns ``None`` when the endpoints are disconnected. ``unique`` is false
    when more than one minimum-length path exists.
    """
    src, dst = graph.endpoints
    adj = graph.adjacency_lists()
    dist = [-1] * graph.m
    ways = [0] * graph.m
    parent = [None] * graph.m
    dist[src], ways[src] = 0, 1
    queue = deque([src])
    while queue:
        u = queue.popleft()
        for v, e in adj[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                parent[v] = (u, e)
                queue.append(v)
            if dist[v] == dist[u] + 1:
                ways[v] += ways[u]
    if dist[dst] < 0:
        return None
    edges = []
    node = dst
    while node != src:
        node, e = parent[node]
        edges.append(e)
    return PathResult(tuple(sorted(edges)), dist[dst], ways[dst] == 1)


def sp_csp(graph, label_edges):
    """CSP over ``m`` node and ``n`` edge variables with the path constraints.

    End nodes must be true and touch exactly one selected edge; every other
    node on the labelled path must touch exactly two.
    """
    inc = graph.incidence
    m = graph.m
    label = np.zeros(graph.n, dtype=np.int64)
    label[list(label_edges)] = 1
    on_path = inc @ label
    cons = []
    for end in graph.endpoints:
        cons.append(CardinalityConstraint.exactly([(end, TRUE)], 1, ("end", end)))
    for i in range(m):
        incident = [(m + e, TRUE) for e in np.flatnonzero(inc[i])]
        if i in graph.endpoints:
            cons.append(CardinalityConstraint.exactly(incident, 1, ("end-degree", i)))
        elif on_path[i] > 0:
            cons.append(CardinalityConstraint.exactly(incident, 2, ("path-degree", i)))
    return CspInstance([2] * (m + graph.n), cons)


def sp_assignment(graph, edges):
    """Encode a selected edge set as a 1/2-valued assignment to ``sp_csp``."""
    edges = set(int(e) for e in edges)
    inc = graph.incidence
    assign = [FALSE] * (graph.m + graph.n)
    for e in edges:
        assign[graph.m + e] = TRUE
        for node in np.flatnonzero(inc[:, e]):
            assign[node] = TRUE
    return assign


def path_report(graph, edges, shortest_length=None):
    """Constraint accuracies for one predicted edge set.

    ``path_valid``: the edges form one simple path joining the endpoints in
    the full grid. ``no_removed_edges``: no removed edge is selected.
    ``shortest_path``: both of the above and the length is minimal.
    """
    edges = sorted(set(int(e) for e in edges))
    grid = graph.edges
    deg = [0] * graph.m
    adj = [[] for _ in range(graph.m)]
    for e in edges:
        u, v = grid[e]
        deg[u] += 1
        deg[v] += 1
        adj[u].append(v)
        adj[v].append(u)
    a, b = graph.endpoints
    valid = bool(edges) and deg[a] == 1 and deg[b] == 1
    if valid:
        valid = all(d in (0, 2) for i, d in enumerate(deg) if i not in (a, b))
    if valid:
        # walk from a; a degree-2 structure plus two leaves is one path iff
        # the walk reaches b having used every edge
        prev, node, steps = None, a, 0
        while True:
            nxt = [v for v in adj[node] if v != prev]
            if node == b or not nxt:
                break
            prev, node = node, nxt[0]
            steps += 1
        valid = node == b and steps == len(edges)
    no_removed = not (set(edges) & graph.removed)
    if shortest_length is None:
        res = bfs_shortest_path(graph)
        shortest_length = res.length if res else None
    shortest = valid and no_removed and shortest_length is not None and len(edges) == shortest_length
    return {"path_valid": valid, "no_removed_edges": no_removed, "shortest_path": shortest}


# ---------------------------------------------------------------------------
# nonograms


def nonogram_runs(line):
    """Lengths of maximal runs of 1s, left to right."""
    runs = []
    n = 0
    for x in line:
        x = int(x)
        if x not in (0, 1):
            raise DataError(f"nonogram cell value {x} not in {{0, 1}}")
        if x:
            n += 1
        elif n:
            runs.append(n)
            n = 0
    if n:
        runs.append(n)
    return runs


def nonogram_clues(grid):
    grid = np.asarray(grid)
    return [nonogram_runs(r) for r in grid], [nonogram_runs(c) for c in grid.T]


def nonogram_check(grid, row_constraints, col_constraints):
    grid = np.asarray(grid)
    if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
        raise DataError(f"nonogram grid must be square, got shape {grid.shape}")
    if len(row_constraints) != grid.shape[0] or len(col_constraints) != grid.shape[1]:
        raise DataError("constraint count does not match grid size")
    rows, cols = nonogram_clues(grid)
    return rows == [list(r) for r in row_constraints] and cols == [list(c) for c in col_constraints]


def line_patterns(clue, size):
    """All 0/1 lines of length ``size`` whose runs equal ``clue``."""
    clue = list(clue)
    if not clue:
        return [(0,) * size]
    out = []

    def place(i, start, acc):
        if i == len(clue):
            out.append(tuple(acc + [0] * (size - len(acc))))
            return
        rest = sum(clue[i + 1 :]) + len(clue) - i - 1
        for s in range(start, size - rest - clue[i] + 1):
            line = acc + [0] * (s - len(acc)) + [1] * clue[i]
            if i + 1 < len(clue):
                line = line + [0]
            place(i + 1, len(line), line)

    place(0, 0, [])
    return out


def _prefix_ok(prefix, clue):
    runs = nonogram_runs(prefix)
    if len(runs) > len(clue):
        return False
    if not runs:
        return True
    open_run = prefix[-1] == 1
    closed = runs[:-1] if open_run else runs
    if closed != list(clue[: len(closed)]):
        return False
    if open_run and runs[-1] > clue[len(runs) - 1]:
        return False
    return True


def nonogram_solutions(row_constraints, col_constraints, limit=2, cap=DEFAULT_CAP):
    """Enumerate grids satisfying the clues, row by row with column pruning."""
    size = len(row_constraints)
    options = [line_patterns(c, size) for c in row_constraints]
    cols = [list(c) for c in col_constraints]
    found = []
    expansions = 0
    grid = []

    def rec(r):
        nonlocal expansions
        if limit is not None and len(found) >= limit:
            return
        if r == size:
            if [nonogram_runs(c) for c in zip(*grid)] == cols:
                found.append(np.array(grid, dtype=np.int64))
            return
        for line in options[r]:
            expansions += 1
            if expansions > cap:
                raise ResourceError(f"nonogram search exceeded {cap} expansions")
            grid.append(line)
            if all(_prefix_ok([row[j] for row in grid], cols[j]) for j in range(size)):
                rec(r + 1)
            grid.pop()
            if limit is not None and len(found) >= limit:
                return

    rec(0)
    return found


def exhaustive_nonogram_solutions(row_constraints, col_constraints):
    """Reference enumeration over all ``2^(N*N)`` grids (tiny sizes only)."""
    size = len(row_constraints)
    out = []
    for bits in product((0, 1), repeat=size * size):
        g = np.array(bits).reshape(size, size)
        if nonogram_check(g, row_constraints, col_constraints):
            out.append(g)
    return out
