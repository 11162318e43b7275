"""Cosine-similarity matrices between adjacent frames and exact solvers
for the maximum-similarity perfect matching.

Conventions: for a similarity matrix S, entry S[i][j] is the cosine
similarity between patch i of the earlier frame and patch j of the later
frame. A Permutation stores a gather map: aligned[j] = original[map[j]],
so the score of a matching is sum_j S[j, map[j]]. The de-alignment map is
the inverse permutation (the transpose of the one-hot matrix).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Permutation",
    "cosine_similarity_matrix",
    "matching_score",
    "solve_assignment_exact",
    "solve_assignment_bruteforce",
    "solve_assignment_greedy",
]

_DEGENERATE_NORM = 1e-12
_TIGHT_TOL = 1e-11


@dataclass(frozen=True)
class Permutation:
    """Bijection on {0..n-1} stored as a gather map."""

    map: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.map, dtype=np.intp)
        if m.ndim != 1 or not np.array_equal(np.sort(m), np.arange(m.size)):
            raise ValueError("Permutation: map is not a bijection")
        object.__setattr__(self, "map", m)
        self.map.setflags(write=False)

    @property
    def n(self):
        return self.map.size

    @classmethod
    def identity(cls, n):
        return cls(np.arange(n))

    def inverse(self):
        inv = np.empty_like(self.map)
        inv[self.map] = np.arange(self.map.size)
        return Permutation(inv)

    def compose(self, other):
        """self after other: gathering by other then by self."""
        return Permutation(other.map[self.map])

    def is_identity(self):
        return bool(np.array_equal(self.map, np.arange(self.map.size)))

    def __eq__(self, other):
        return isinstance(other, Permutation) and np.array_equal(self.map, other.map)

    def __hash__(self):
        return hash(self.map.tobytes())


def cosine_similarity_matrix(prev, curr):
    """S[i][j] = cos(prev_i, curr_j); zero-norm patches get similarity 0."""
    prev = np.asarray(prev, dtype=np.float64)
    curr = np.asarray(curr, dtype=np.float64)
    if prev.shape != curr.shape or prev.ndim != 2:
        raise ValueError(f"cosine_similarity_matrix: shape mismatch {prev.shape} vs {curr.shape}")
    pn = np.linalg.norm(prev, axis=1)
    cn = np.linalg.norm(curr, axis=1)
    ps = np.where(pn < _DEGENERATE_NORM, 1.0, pn)
    cs = np.where(cn < _DEGENERATE_NORM, 1.0, cn)
    s = (prev / ps[:, None]) @ (curr / cs[:, None]).T
    s[pn < _DEGENERATE_NORM, :] = 0.0
    s[:, cn < _DEGENERATE_NORM] = 0.0
    return s


def _check_square(s):
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] < 1:
        raise ValueError("similarity matrix must be square and non-empty")
    return s


def matching_score(s, p):
    """Total similarity of the matched pairs: sum_j S[j, map[j]]."""
    s = _check_square(s)
    if p.n != s.shape[0]:
        raise ValueError("matching_score: size mismatch")
    return float(s[np.arange(p.n), p.map].sum())


def _hungarian_duals(cost):
    """O(n^3) shortest-augmenting-path assignment on a square cost matrix.

    Returns (col_of_row, u, v) with u[i] + v[j] <= cost[i, j] and equality
    on assigned edges (up to rounding).
    """
    n = cost.shape[0]
    a = cost.tolist()
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)  # p[j]: row (1-based) matched to col j; col 0 is virtual
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = a[i0 - 1]
            ui = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - ui - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.intp)
    col_of_row[np.asarray(p[1:]) - 1] = np.arange(n)
    return col_of_row, np.asarray(u[1:]), np.asarray(v[1:])


def _kuhn_augment(row, adj, match_col, match_row, frozen_rows):
    """Try to find an augmenting path for `row` in the tight graph,
    avoiding columns whose match is a frozen (already fixed) row."""
    seen = np.zeros(match_col.size, dtype=bool)

    def dfs(r):
        for c in adj[r]:
            if seen[c]:
                continue
            seen[c] = True
            m = match_row[c]
            if m == -1 or (m not in frozen_rows and dfs(m)):
                match_row[c] = r
                match_col[r] = c
                return True
        return False

    return dfs(row)


def _lexicographic_refine(cost, col_of_row, u, v):
    """Among matchings using only tight edges (hence optimal), pick the
    one whose gather map is lexicographically smallest."""
    n = cost.shape[0]
    scale = max(1.0, float(np.abs(cost).max()))
    tight = cost - u[:, None] - v[None, :] <= _TIGHT_TOL * scale
    adj = [np.flatnonzero(tight[r]) for r in range(n)]
    match_col = col_of_row.copy()
    match_row = np.empty(n, dtype=np.intp)
    match_row[match_col] = np.arange(n)
    frozen = set()
    for r in range(n):
        current = match_col[r]
        for c in adj[r]:
            if c >= current:
                break
            displaced = match_row[c]
            if displaced in frozen:
                continue
            # tentatively steal column c and reroute the displaced row
            saved_col = match_col.copy()
            saved_row = match_row.copy()
            match_row[current] = -1
            match_col[r] = c
            match_row[c] = r
            match_col[displaced] = -1
            frozen.add(r)
            if _kuhn_augment(displaced, adj, match_col, match_row, frozen):
                break
            frozen.discard(r)
            match_col = saved_col
            match_row = saved_row
        else:
            frozen.add(r)
            continue
        frozen.add(r)
    return match_col


def solve_assignment_exact(s):
    """Permutation maximizing the matching score (Hungarian on 1 - S);
    ties broken toward the lexicographically smallest map."""
    s = _check_square(s)
    if not np.all(np.isfinite(s)):
        raise ValueError("solve_assignment_exact: non-finite entries")
    n = s.shape[0]
    if n == 1:
        return Permutation.identity(1)
    cost = 1.0 - s
    col_of_row, u, v = _hungarian_duals(cost)
    return Permutation(_lexicographic_refine(cost, col_of_row, u, v))


def solve_assignment_bruteforce(s):
    """Exhaustive maximum over all n! matchings; oracle for the exact solver."""
    s = _check_square(s)
    n = s.shape[0]
    if n > 10:
        raise ValueError("solve_assignment_bruteforce: n > 10 rejected")
    rows = np.arange(n)
    best_score = -np.inf
    best = None
    for perm in itertools.permutations(range(n)):
        score = s[rows, perm].sum()
        if score > best_score:
            best_score = score
            best = perm
    return Permutation(np.array(best, dtype=np.intp))


def solve_assignment_greedy(s):
    """Repeatedly take the globally largest unused entry; benchmark baseline."""
    s = _check_square(s)
    if not np.all(np.isfinite(s)):
        raise ValueError("solve_assignment_greedy: non-finite entries")
    n = s.shape[0]
    i_idx, j_idx = np.divmod(np.arange(n * n), n)
    order = np.lexsort((j_idx, i_idx, -s.ravel()))
    out = np.full(n, -1, dtype=np.intp)
    col_used = np.zeros(n, dtype=bool)
    row_used = np.zeros(n, dtype=bool)
    placed = 0
    for k in order:
        i, j = i_idx[k], j_idx[k]
        if row_used[i] or col_used[j]:
            continue
        out[i] = j
        row_used[i] = True
        col_used[j] = True
        placed += 1
        if placed == n:
            break
    return Permutation(out)
