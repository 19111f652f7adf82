from itertools import permutations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cstlab import csp
from cstlab.csp import FALSE, TRUE, CardinalityConstraint, CspInstance, GridGraph
from cstlab.errors import DataError, ResourceError

SOLUTION4 = [1, 2, 3, 4,
             3, 4, 1, 2,
             2, 1, 4, 3,
             4, 3, 2, 1]


def all_4x4_solutions():
    """Every 4x4 Sudoku by filtering row permutations (independent of the solver)."""
    rows = list(permutations(range(1, 5)))
    out = []
    for a in rows:
        for b in rows:
            if any(x == y for x, y in zip(a, b)) or set(a[:2] + b[:2]) != {1, 2, 3, 4} \
                    or set(a[2:] + b[2:]) != {1, 2, 3, 4}:
                continue
            for c in rows:
                if any(c[i] in (a[i], b[i]) for i in range(4)):
                    continue
                d = tuple(10 - a[i] - b[i] - c[i] for i in range(4))
                if sorted(d) == [1, 2, 3, 4] and set(c[:2] + d[:2]) == {1, 2, 3, 4}:
                    out.append(list(a + b + c + d))
    return out


class TestCardinalityConstraint:
    def test_bounds_validated(self):
        with pytest.raises(DataError):
            CardinalityConstraint(((0, 1),), 1, 2)
        with pytest.raises(DataError):
            CardinalityConstraint(((0, 1),), 1, 0)

    def test_count_and_holds(self):
        con = CardinalityConstraint.exactly([(0, 1), (1, 1), (2, 1)], 1)
        assert con.count([1, 2, 1]) == 2
        assert not con.holds([1, 2, 1])
        assert con.holds([2, 2, 1])


class TestCheckAssignment:
    def test_valid_solution(self):
        assert csp.check_assignment(csp.sudoku_csp(2), SOLUTION4) == []

    def test_duplicate_in_first_row(self):
        board = list(SOLUTION4)
        board[1] = 1  # row 1 reads 1,1,3,4
        tags = {v.constraint.tag for v in csp.check_assignment(csp.sudoku_csp(2), board)}
        assert ("row", 0, 1) in tags and ("row", 0, 2) in tags
        assert not any(t[0] == "row" and t[1] != 0 for t in tags)
        counts = {v.constraint.tag: v.count for v in csp.check_assignment(csp.sudoku_csp(2), board)}
        assert counts[("row", 0, 1)] == 2 and counts[("row", 0, 2)] == 0

    def test_no_constraints(self):
        assert csp.check_assignment(CspInstance([3, 3]), [1, 3]) == []

    def test_out_of_domain(self):
        with pytest.raises(DataError):
            csp.check_assignment(CspInstance([3, 3]), [1, 4])
        with pytest.raises(DataError):
            csp.check_assignment(CspInstance([3, 3]), [1])


class TestBruteForce:
    def test_fully_constrained(self):
        inst = CspInstance([2, 3], [CardinalityConstraint.exactly([(0, 2)], 1),
                                    CardinalityConstraint.exactly([(1, 3)], 1)])
        assert csp.brute_force_solve(inst) == [[2, 3]]

    def test_contradiction(self):
        inst = CspInstance([2], [CardinalityConstraint((), 0, 0), CardinalityConstraint.exactly([(0, 1)], 1),
                                 CardinalityConstraint.exactly([(0, 2)], 1)])
        assert csp.brute_force_solve(inst) == []

    def test_lexicographic_enumeration(self):
        inst = CspInstance([3, 3, 2])
        sols = csp.brute_force_solve(inst)
        assert sols == sorted(sols) and len(sols) == 18

    def test_all_4x4_sudokus(self):
        oracle = sorted(all_4x4_solutions())
        assert len(oracle) == 288
        assert csp.brute_force_solve(csp.sudoku_csp(2)) == oracle
        mrv = csp.brute_force_solve(csp.sudoku_csp(2), order="mrv")
        assert sorted(mrv) == oracle

    def test_unique_puzzle(self):
        puzzle = [0 if i % 3 else v for i, v in enumerate(SOLUTION4)]
        sols = csp.brute_force_solve(csp.sudoku_csp(2, puzzle), limit=2)
        assert all(csp.check_assignment(csp.sudoku_csp(2, puzzle), s) == [] for s in sols)
        assert SOLUTION4 in sols

    def test_limit(self):
        assert len(csp.brute_force_solve(csp.sudoku_csp(2), limit=5)) == 5

    def test_cap(self):
        with pytest.raises(ResourceError):
            csp.brute_force_solve(csp.sudoku_csp(3), cap=50)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(2, 3), min_size=1, max_size=4), st.integers(0, 10**6))
    def test_matches_enumeration(self, domains, seed):
        rng = np.random.default_rng(seed)
        cons = []
        for _ in range(3):
            atoms = [(int(v), int(rng.integers(1, domains[v] + 1))) for v in rng.choice(len(domains), 2)]
            atoms = list(dict.fromkeys(atoms))
            lo = int(rng.integers(0, len(atoms) + 1))
            cons.append(CardinalityConstraint(atoms, lo, int(rng.integers(lo, len(atoms) + 1))))
        inst = CspInstance(domains, cons)
        from itertools import product
        brute = [list(a) for a in product(*[range(1, c + 1) for c in domains])
                 if not csp.check_assignment(inst, a)]
        assert csp.brute_force_solve(inst) == brute


class TestLayout:
    @pytest.mark.parametrize("n,groups,deg", [(2, 12, 8), (3, 27, 21)])
    def test_shape_and_degree(self, n, groups, deg):
        lay = csp.sudoku_layout(n)
        assert lay.index_array.shape == (groups, n * n)
        M = lay.adjacency
        np.testing.assert_array_equal(M.sum(1), deg)
        np.testing.assert_array_equal(M, M.T)
        assert np.all(np.diag(M) == 1)

    def test_adjacency_by_enumeration(self):
        n, side = 3, 9
        M = csp.sudoku_layout(n).adjacency
        for i in range(81):
            for j in range(81):
                ri, ci, rj, cj = i // side, i % side, j // side, j % side
                same = ri == rj or ci == cj or (ri // n, ci // n) == (rj // n, cj // n)
                assert M[i, j] == same

    def test_too_small(self):
        with pytest.raises(DataError):
            csp.sudoku_layout(1)


class TestGrid:
    def test_edge_order(self):
        assert csp.grid_edges(2) == ((0, 1), (0, 2), (1, 3), (2, 3))
        assert len(csp.grid_edges(4)) == 24

    def test_incidence(self):
        inc = csp.incidence_matrix(4)
        assert inc.shape == (16, 24)
        np.testing.assert_array_equal(inc.sum(0), 2)
        assert inc[0].sum() == 2 and inc[5].sum() == 4

    def test_graph_validation(self):
        with pytest.raises(DataError):
            GridGraph(4, frozenset(range(8)), (3, 3))
        with pytest.raises(DataError):
            GridGraph(4, frozenset(range(7)), (0, 1))

    def test_adjacent_endpoints(self):
        g = GridGraph(4, frozenset(range(16, 24)), (0, 1))
        res = csp.bfs_shortest_path(g)
        assert res.edges == (0,) and res.length == 1 and res.unique

    def test_disconnected(self):
        # node 0 touches edges 0 and 1
        g = GridGraph(4, frozenset([0, 1, 10, 11, 12, 13, 14, 15]), (0, 15))
        assert csp.bfs_shortest_path(g) is None

    def test_non_unique_flagged(self):
        g = GridGraph(4, frozenset(range(16, 24)), (0, 5))
        assert not csp.bfs_shortest_path(g).unique

    def test_bfs_label_satisfies_path_constraints(self):
        rng = np.random.default_rng(0)
        seen = 0
        while seen < 200:
            removed = frozenset(rng.choice(24, 8, replace=False).tolist())
            ends = tuple(rng.choice(16, 2, replace=False).tolist())
            g = GridGraph(4, removed, ends)
            res = csp.bfs_shortest_path(g)
            if res is None:
                continue
            seen += 1
            assert not set(res.edges) & removed
            inst = csp.sp_csp(g, res.edges)
            assert csp.check_assignment(inst, csp.sp_assignment(g, res.edges)) == []
            assert csp.path_report(g, res.edges) == {"path_valid": True, "no_removed_edges": True,
                                                     "shortest_path": True}

    def test_path_report_failures(self):
        g = GridGraph(4, frozenset(range(16, 24)), (0, 2))
        assert csp.path_report(g, [0, 2]) == {"path_valid": True, "no_removed_edges": True,
                                              "shortest_path": True}
        assert not csp.path_report(g, [0])["path_valid"]
        assert not csp.path_report(g, [])["path_valid"]
        # 0-4-5-6-2 is a path but not a shortest one
        idx = {e: i for i, e in enumerate(csp.grid_edges(4))}
        detour = [idx[(0, 4)], idx[(4, 5)], idx[(5, 6)], idx[(2, 6)]]
        assert csp.path_report(g, detour) == {"path_valid": True, "no_removed_edges": True,
                                              "shortest_path": False}
        removed = GridGraph(4, frozenset([0] + list(range(17, 24))), (0, 2))
        assert csp.path_report(removed, [0, 2]) == {"path_valid": True, "no_removed_edges": False,
                                                    "shortest_path": False}

    def test_cycle_plus_path_rejected(self):
        # 0-1 path plus a disjoint square 5-6-10-9 has the right degrees but is not one path
        idx = {e: i for i, e in enumerate(csp.grid_edges(4))}
        square = [idx[(5, 6)], idx[(6, 10)], idx[(9, 10)], idx[(5, 9)]]
        g = GridGraph(4, frozenset(range(16, 24)), (0, 1))
        assert not csp.path_report(g, [idx[(0, 1)]] + square)["path_valid"]


def runs_by_diff(line):
    """Second run-length implementation via sign changes of a padded line."""
    d = np.diff(np.concatenate([[0], line, [0]]))
    return (np.flatnonzero(d == -1) - np.flatnonzero(d == 1)).tolist()


class TestNonogram:
    def test_runs(self):
        assert csp.nonogram_runs([1, 1, 0, 1]) == [2, 1]
        assert csp.nonogram_runs([0, 0, 0]) == []
        with pytest.raises(DataError):
            csp.nonogram_runs([2])

    @settings(max_examples=100)
    @given(st.lists(st.integers(0, 1), min_size=7, max_size=7))
    def test_runs_dual_implementation(self, line):
        assert csp.nonogram_runs(line) == runs_by_diff(np.array(line))

    def test_empty_grid(self):
        assert csp.nonogram_check(np.zeros((3, 3), int), [[]] * 3, [[]] * 3)

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            csp.nonogram_check(np.zeros((2, 3), int), [[]] * 2, [[]] * 3)

    def test_every_flip_breaks(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            g = rng.integers(0, 2, (4, 4))
            rows, cols = csp.nonogram_clues(g)
            assert csp.nonogram_check(g, rows, cols)
            for i in range(4):
                for j in range(4):
                    h = g.copy()
                    h[i, j] ^= 1
                    assert not csp.nonogram_check(h, rows, cols)

    def test_line_patterns(self):
        assert csp.line_patterns([2, 1], 5) == [(1, 1, 0, 1, 0), (1, 1, 0, 0, 1), (0, 1, 1, 0, 1)]
        assert csp.line_patterns([], 3) == [(0, 0, 0)]
        for p in csp.line_patterns([1, 2], 6):
            assert csp.nonogram_runs(p) == [1, 2]

    def test_solver_matches_exhaustive(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            g = rng.integers(0, 2, (3, 3))
            rows, cols = csp.nonogram_clues(g)
            fast = csp.nonogram_solutions(rows, cols, limit=None)
            slow = csp.exhaustive_nonogram_solutions(rows, cols)
            key = lambda a: a.tobytes()  # noqa: E731
            assert sorted(map(key, fast)) == sorted(map(key, slow))

    def test_all_ones_unique(self):
        rows = cols = [[5]] * 5
        assert len(csp.nonogram_solutions(rows, cols)) == 1
