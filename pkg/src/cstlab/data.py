"""Dataset generation, token encoding and line-oriented file formats.

Labels are 0-based class ids with ``NA = -1`` for unknown labels. For Sudoku,
class ``k`` is digit ``k + 1``; for the Boolean tasks class 1 means true.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import csp
from .errors import ConfigError, DataError, GenerationError, ParseError

NA = -1
GENERATOR_VERSION = "1"

SP_NODE, SP_END = 0, 1
SP_REMOVED, SP_PRESENT = 2, 3


@dataclass(eq=False)
class Instance:
    tokens: np.ndarray
    labels: np.ndarray
    task: str
    meta: dict = field(default_factory=dict)

    def __eq__(self, other):
        return (
            isinstance(other, Instance)
            and self.task == other.task
            and np.array_equal(self.tokens, other.tokens)
            and np.array_equal(self.labels, other.labels)
            and _meta_key(self.meta) == _meta_key(other.meta)
        )

    @property
    def labeled(self):
        return bool(np.any(self.labels != NA))

    def key(self):
        return self.task, np.asarray(self.tokens).tobytes()


def _meta_key(meta):
    return json.dumps(meta, sort_keys=True, default=lambda o: sorted(o) if isinstance(o, frozenset) else str(o))


@dataclass
class DatasetSplit:
    train: list
    test: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        seen = {inst.key() for inst in self.train}
        if any(inst.key() in seen for inst in self.test):
            raise DataError("train and test share a token sequence")


def _draw_disjoint(make_one, count, test_count, rng, max_attempts):
    seen = set()
    out = []
    attempts = 0
    while len(out) < count + test_count:
        attempts += 1
        if attempts > max_attempts:
            raise GenerationError(f"produced only {len(out)} of {count + test_count} instances")
        inst = make_one(rng)
        if inst is None or inst.key() in seen:
            continue
        seen.add(inst.key())
        out.append(inst)
    return out[:count], out[count:]


# ---------------------------------------------------------------------------
# Sudoku


def sudoku_task_name(n):
    return f"sudoku{n * n}"


def random_sudoku_solution(n, rng):
    """Uniformly shuffled backtracking fill of an empty board."""
    side = n * n
    board = [0] * (side * side)
    rows = [set() for _ in range(side)]
    cols = [set() for _ in range(side)]
    boxes = [set() for _ in range(side)]

    def box(i):
        r, c = divmod(i, side)
        return (r // n) * n + c // n

    def fill(i):
        if i == side * side:
            return True
        r, c = divmod(i, side)
        b = box(i)
        for d in rng.permutation(side) + 1:
            d = int(d)
            if d in rows[r] or d in cols[c] or d in boxes[b]:
                continue
            board[i] = d
            rows[r].add(d), cols[c].add(d), boxes[b].add(d)
            if fill(i + 1):
                return True
            rows[r].discard(d), cols[c].discard(d), boxes[b].discard(d)
        board[i] = 0
        return False

    fill(0)
    return board


def sudoku_solutions(n, puzzle, limit=2):
    return csp.brute_force_solve(csp.sudoku_csp(n, puzzle), limit=limit, order="mrv")


def sudoku_instance(n, puzzle, solution):
    puzzle = np.asarray(puzzle, dtype=np.int64)
    solution = np.asarray(solution, dtype=np.int64)
    return Instance(puzzle, solution - 1, sudoku_task_name(n))


def gen_sudoku(n, count, givens_range, seed, test_count=0, max_retries=200):
    """Puzzles with a unique solution and a uniformly drawn number of givens.

    Cells of a random solved board are removed in random order as long as
    the puzzle stays uniquely solvable; boards that cannot be thinned to the
    drawn count are discarded.
    """
    if n not in (2, 3):
        raise ConfigError("generation supports box order 2 or 3 only")
    side = n * n
    cells = side * side
    lo, hi = givens_range
    if not 0 <= lo <= hi <= cells:
        raise ConfigError(f"givens range {givens_range} infeasible for {cells} cells")

    def make_one(rng):
        target = int(rng.integers(lo, hi + 1))
        for _ in range(max_retries):
            solution = random_sudoku_solution(n, rng)
            puzzle = list(solution)
            givens = cells
            for i in rng.permutation(cells):
                if givens == target:
                    break
                keep = puzzle[i]
                puzzle[i] = 0
                if len(sudoku_solutions(n, puzzle, limit=2)) == 1:
                    givens -= 1
                else:
                    puzzle[i] = keep
            if givens == target:
                sols = sudoku_solutions(n, puzzle, limit=2)
                if len(sols) != 1 or sols[0] != solution:
                    raise GenerationError("uniqueness verification failed")
                return sudoku_instance(n, puzzle, solution)
        raise GenerationError(f"could not reach {target} givens after {max_retries} boards")

    rng = np.random.default_rng(seed)
    train, test = _draw_disjoint(make_one, count, test_count, rng, 50 * (count + test_count) + 100)
    prov = {"task": sudoku_task_name(n), "seed": seed, "generator_version": GENERATOR_VERSION,
            "givens_range": [lo, hi]}
    return DatasetSplit(train, test, prov)


def _format_board(values, side):
    if side <= 9:
        return "".join(str(int(v)) for v in values)
    return " ".join(str(int(v)) for v in values)


def _parse_board(text, side, lineno):
    cells = side * side
    if side <= 9:
        if len(text) != cells or not text.isascii() or not text.isdigit():
            raise ParseError(f"expected {cells} ASCII digits, got {text!r}", lineno)
        vals = [int(ch) for ch in text]
    else:
        parts = text.split(" ")
        if len(parts) != cells or not all(p.isascii() and p.isdigit() for p in parts):
            raise ParseError(f"expected {cells} space-separated integers", lineno)
        vals = [int(p) for p in parts]
    if any(v > side for v in vals):
        raise ParseError(f"value above {side}", lineno)
    return vals


def sudoku_line(inst, n):
    side = n * n
    if np.any(inst.labels == NA):
        raise DataError("cannot write a Sudoku instance with unknown labels")
    return f"{_format_board(inst.tokens, side)},{_format_board(inst.labels + 1, side)}\n"


def write_sudoku_csv(path, instances, n):
    with open(path, "w", encoding="ascii", newline="") as f:
        for inst in instances:
            f.write(sudoku_line(inst, n))


def load_sudoku_csv(path, n):
    """Parse ``<puzzle>,<solution>`` lines; every solution is checked."""
    side = n * n
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError as e:
        raise ParseError(f"non-ASCII byte at offset {e.start}") from e
    if not text:
        return []
    lines = text.split("\n")
    if lines[-1] != "":
        raise ParseError("missing trailing newline", len(lines))
    out = []
    for lineno, line in enumerate(lines[:-1], start=1):
        parts = line.split(",")
        if len(parts) != 2:
            raise ParseError("expected '<puzzle>,<solution>'", lineno)
        puzzle = _parse_board(parts[0], side, lineno)
        solution = _parse_board(parts[1], side, lineno)
        if 0 in solution:
            raise DataError(f"line {lineno}: solution has an empty cell")
        violations = csp.check_assignment(csp.sudoku_csp(n, puzzle), solution)
        if violations:
            tags = ", ".join(str(v.constraint.tag) for v in violations[:4])
            raise DataError(f"line {lineno}: solution violates {len(violations)} constraints ({tags})")
        out.append(sudoku_instance(n, puzzle, solution))
    return out


def mask_givens(instances):
    """Ungrounded-style copies whose given cells carry NA labels."""
    out = []
    for inst in instances:
        labels = np.where(inst.tokens != 0, NA, inst.labels)
        out.append(replace(inst, labels=labels))
    return out


# ---------------------------------------------------------------------------
# shortest path


def sp_tokens(graph):
    nodes = np.full(graph.m, SP_NODE, dtype=np.int64)
    nodes[list(graph.endpoints)] = SP_END
    edges = np.full(graph.n, SP_PRESENT, dtype=np.int64)
    edges[sorted(graph.removed)] = SP_REMOVED
    return np.concatenate([nodes, edges])


def sp_instance(graph, label_edges):
    labels = np.full(graph.m + graph.n, NA, dtype=np.int64)
    labels[graph.m:] = 0
    labels[graph.m + np.asarray(sorted(label_edges), dtype=np.int64)] = 1
    meta = {"grid_n": graph.order, "removed_edges": sorted(graph.removed),
            "endpoints": list(graph.endpoints), "label_edges": sorted(int(e) for e in label_edges)}
    return Instance(sp_tokens(graph), labels, "sp", meta)


def sp_graph(inst):
    return csp.GridGraph(inst.meta["grid_n"], frozenset(inst.meta["removed_edges"]),
                         tuple(inst.meta["endpoints"]))


def gen_shortest_path(grid_order, count, seed, test_count=0, max_attempts=None):
    """Random endpoints, ``n // 3`` removed edges, BFS label.

    Disconnected graphs and graphs with more than one shortest path are
    redrawn, so every label is unambiguous.
    """
    if grid_order < 2:
        raise ConfigError("grid order must be at least 2")
    k = grid_order
    m, n = k * k, 2 * k * (k - 1)

    def make_one(rng):
        a, b = (int(x) for x in rng.choice(m, 2, replace=False))
        removed = frozenset(int(x) for x in rng.choice(n, n // 3, replace=False))
        graph = csp.GridGraph(k, removed, (a, b))
        res = csp.bfs_shortest_path(graph)
        if res is None or not res.unique:
            return None
        return sp_instance(graph, res.edges)

    rng = np.random.default_rng(seed)
    budget = max_attempts or 200 * (count + test_count) + 1000
    train, test = _draw_disjoint(make_one, count, test_count, rng, budget)
    prov = {"task": "sp", "seed": seed, "generator_version": GENERATOR_VERSION, "grid_order": k}
    return DatasetSplit(train, test, prov)


def check_sp_label(graph, label_edges):
    """Violations of the path constraints plus a removed-edge check."""
    inst = csp.sp_csp(graph, label_edges)
    problems = [str(v.constraint.tag) for v in csp.check_assignment(inst, csp.sp_assignment(graph, label_edges))]
    if set(label_edges) & graph.removed:
        problems.append("uses removed edge")
    return problems


def sp_line(inst):
    m = inst.meta
    obj = {"grid_n": m["grid_n"], "removed_edges": m["removed_edges"],
           "endpoints": m["endpoints"], "label_edges": m["label_edges"]}
    return json.dumps(obj, separators=(",", ":")) + "\n"


# ---------------------------------------------------------------------------
# nonograms


def default_max_runs(size):
    return (size + 1) // 2


def encode_nonogram_tokens(row_constraints, col_constraints, max_runs):
    """Per cell: the column clue then the row clue, each left-padded with zeros."""
    def pad(clue):
        clue = list(clue)
        if len(clue) > max_runs:
            raise ConfigError(f"clue {clue} longer than max_runs={max_runs}")
        return [0] * (max_runs - len(clue)) + clue

    rows = [pad(r) for r in row_constraints]
    cols = [pad(c) for c in col_constraints]
    feats = [cols[j] + rows[i] for i in range(len(rows)) for j in range(len(cols))]
    return np.asarray(feats, dtype=np.int64).reshape(len(rows) * len(cols), 2 * max_runs)


def nonogram_instance(solution, max_runs=None):
    solution = np.asarray(solution, dtype=np.int64)
    rows, cols = csp.nonogram_clues(solution)
    max_runs = max_runs or default_max_runs(solution.shape[0])
    tokens = encode_nonogram_tokens(rows, cols, max_runs)
    meta = {"rows": rows, "cols": cols, "size": int(solution.shape[0])}
    return Instance(tokens, solution.reshape(-1).copy(), "nonogram", meta)


def gen_nonogram(grid_order, count, seed, fill_prob=0.5, test_count=0, max_runs=None,
                 unique_up_to=7, max_attempts=None):
    """Random binary images; ambiguous clue sets are redrawn for small grids."""
    if grid_order < 3:
        raise ConfigError("nonogram grids must be at least 3x3")
    size = grid_order

    def make_one(rng):
        grid = (rng.random((size, size)) < fill_prob).astype(np.int64)
        if size <= unique_up_to:
            rows, cols = csp.nonogram_clues(grid)
            if len(csp.nonogram_solutions(rows, cols, limit=2)) != 1:
                return None
        return nonogram_instance(grid, max_runs)

    rng = np.random.default_rng(seed)
    budget = max_attempts or 200 * (count + test_count) + 1000
    train, test = _draw_disjoint(make_one, count, test_count, rng, budget)
    prov = {"task": "nonogram", "seed": seed, "generator_version": GENERATOR_VERSION,
            "grid_order": size, "fill_prob": fill_prob}
    return DatasetSplit(train, test, prov)


def nonogram_solution(inst):
    size = inst.meta["size"]
    return inst.labels.reshape(size, size)


def nonogram_line(inst):
    if np.any(inst.labels == NA):
        raise DataError("cannot write a nonogram instance with unknown labels")
    obj = {"rows": inst.meta["rows"], "cols": inst.meta["cols"],
           "solution": nonogram_solution(inst).tolist()}
    return json.dumps(obj, separators=(",", ":")) + "\n"


# ---------------------------------------------------------------------------
# JSON-lines I/O


def _load_jsonl(path, parse):
    text = Path(path).read_bytes().decode("utf-8")
    if not text:
        return []
    lines = text.split("\n")
    if lines[-1] != "":
        raise ParseError("missing trailing newline", len(lines))
    out = []
    for lineno, line in enumerate(lines[:-1], start=1):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON: {e.msg}", lineno) from e
        if not isinstance(obj, dict):
            raise ParseError("expected a JSON object", lineno)
        try:
            out.append(parse(obj))
        except (KeyError, TypeError) as e:
            raise ParseError(f"missing or malformed field {e}", lineno) from e
        except DataError as e:
            raise DataError(f"line {lineno}: {e}") from e
    return out


def _int_list(values):
    if not isinstance(values, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in values):
        raise TypeError("integer array")
    return values


def _parse_sp(obj):
    fields = {"grid_n", "removed_edges", "endpoints", "label_edges"}
    if set(obj) != fields:
        raise KeyError(sorted(set(obj) ^ fields))
    graph = csp.GridGraph(int(obj["grid_n"]), frozenset(_int_list(obj["removed_edges"])),
                          tuple(_int_list(obj["endpoints"])))
    label = _int_list(obj["label_edges"])
    if any(not 0 <= e < graph.n for e in label):
        raise DataError("label edge index out of range")
    problems = check_sp_label(graph, label)
    if problems:
        raise DataError(f"label violates {problems}")
    inst = sp_instance(graph, label)
    # keep field order as read so a rewrite reproduces the line
    inst.meta["removed_edges"] = list(obj["removed_edges"])
    inst.meta["label_edges"] = list(obj["label_edges"])
    return inst


def load_sp_jsonl(path):
    return _load_jsonl(path, _parse_sp)


def write_sp_jsonl(path, instances):
    with open(path, "w", encoding="utf-8", newline="") as f:
        for inst in instances:
            f.write(sp_line(inst))


def _parse_nonogram(obj, max_runs=None):
    fields = {"rows", "cols", "solution"}
    if set(obj) != fields:
        raise KeyError(sorted(set(obj) ^ fields))
    solution = obj["solution"]
    if not isinstance(solution, list) or not all(isinstance(r, list) for r in solution):
        raise TypeError("solution")
    for r in solution:
        _int_list(r)
    rows = [_int_list(r) for r in obj["rows"]]
    cols = [_int_list(c) for c in obj["cols"]]
    grid = np.asarray(solution, dtype=np.int64)
    if not csp.nonogram_check(grid, rows, cols):
        raise DataError("solution does not satisfy its clues")
    return nonogram_instance(grid, max_runs)


def load_nonogram_jsonl(path, max_runs=None):
    return _load_jsonl(path, lambda obj: _parse_nonogram(obj, max_runs))


def write_nonogram_jsonl(path, instances):
    with open(path, "w", encoding="utf-8", newline="") as f:
        for inst in instances:
            f.write(nonogram_line(inst))


def write_instances(path, instances, task):
    if task.startswith("sudoku"):
        write_sudoku_csv(path, instances, _box_order(task))
    elif task == "sp":
        write_sp_jsonl(path, instances)
    elif task == "nonogram":
        write_nonogram_jsonl(path, instances)
    else:
        raise ConfigError(f"unknown task {task!r}")


def load_instances(path, task):
    if task.startswith("sudoku"):
        return load_sudoku_csv(path, _box_order(task))
    if task == "sp":
        return load_sp_jsonl(path)
    if task == "nonogram":
        return load_nonogram_jsonl(path)
    raise ConfigError(f"unknown task {task!r}")


def _box_order(task):
    side = int(task[len("sudoku"):])
    n = math.isqrt(side)
    if n * n != side or n < 2:
        raise ConfigError(f"unknown task {task!r}")
    return n


# ---------------------------------------------------------------------------
# semi-supervised masking


def mask_instances(instances, fraction_unlabeled, seed):
    """Copies of ``instances`` where a seeded subset has every label set to NA."""
    if not 0.0 <= fraction_unlabeled <= 1.0:
        raise ConfigError(f"fraction {fraction_unlabeled} outside [0, 1]")
    k = int(math.floor(fraction_unlabeled * len(instances) + 0.5))
    chosen = set(np.random.default_rng(seed).permutation(len(instances))[:k].tolist())
    return [replace(inst, labels=np.full_like(inst.labels, NA)) if i in chosen else inst
            for i, inst in enumerate(instances)]


def mask_labels(split, fraction_unlabeled, seed):
    """Mask a fraction of the training instances; the test part is untouched."""
    train = mask_instances(split.train, fraction_unlabeled, seed)
    prov = dict(split.provenance, fraction_unlabeled=fraction_unlabeled, mask_seed=seed)
    return DatasetSplit(train, list(split.test), prov)
