"""Metric-space operations on Q-points, i.e. unordered Q-tuples of vectors in R^d."""

import itertools
from functools import lru_cache

import numpy as np
from scipy.optimize import linear_sum_assignment

TAU_COIN = 1e-9
ORTHO_TOL = 1e-10

# batched matchings enumerate permutations up to this Q, larger Q loops over
# an assignment solver per pair
_ENUM_MAX_Q = 6


class DimensionError(ValueError):
    pass


class QPoint:
    """An unordered multiset of Q vectors in R^d.

    Sheets are stored in some order, but every operation in this module is
    invariant under reordering them.
    """

    __slots__ = ("_sheets",)

    def __init__(self, sheets):
        arr = np.array(sheets, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionError(f"sheets must form a (Q, d) array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("sheets must be finite")
        arr.setflags(write=False)
        self._sheets = arr

    @classmethod
    def collapsed(cls, v, Q):
        """Q⟦v⟧."""
        v = np.atleast_1d(np.asarray(v, dtype=float))
        return cls(np.repeat(v[None, :], Q, axis=0))

    @classmethod
    def from_flat(cls, flat, Q, d):
        flat = np.asarray(flat, dtype=float)
        if flat.size != Q * d:
            raise DimensionError(f"expected {Q * d} numbers for Q={Q}, d={d}, got {flat.size}")
        return cls(flat.reshape(Q, d))

    @property
    def sheets(self):
        return self._sheets

    @property
    def Q(self):
        return self._sheets.shape[0]

    @property
    def d(self):
        return self._sheets.shape[1]

    def canonical(self):
        """Sheets sorted lexicographically; used for hashing and serialization."""
        return canonical_sheets(self._sheets)

    def to_flat(self):
        return self.canonical().ravel()

    def same_as(self, other, tol=0.0):
        return g_distance(self, other) <= tol

    def __eq__(self, other):
        if not isinstance(other, QPoint):
            return NotImplemented
        if self.Q != other.Q or self.d != other.d:
            return False
        return np.array_equal(self.canonical(), other.canonical())

    def __hash__(self):
        return hash((self.Q, self.d, self.canonical().tobytes()))

    def __repr__(self):
        inner = " + ".join("[" + ", ".join(f"{x:g}" for x in p) + "]" for p in self._sheets)
        return f"QPoint({inner})"


def canonical_sheets(sheets):
    sheets = np.asarray(sheets, dtype=float)
    order = np.lexsort(sheets.T[::-1])
    return sheets[order]


def _as_sheets(T):
    if isinstance(T, QPoint):
        return T.sheets
    arr = np.asarray(T, dtype=float)
    if arr.ndim != 2:
        raise DimensionError(f"expected a (Q, d) array of sheets, got shape {arr.shape}")
    return arr


def _check_pair(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"Q-points differ in shape: (Q, d) = {a.shape} vs {b.shape}")


def cost_matrix(T, S):
    a, b = _as_sheets(T), _as_sheets(S)
    _check_pair(a, b)
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _tie_tol(a, b):
    return 1e-12 * (np.sum(a * a) + np.sum(b * b)) + 1e-300


def optimal_matching(T, S):
    """Permutation sigma minimising sum |p_l - q_sigma(l)|^2.

    Among optimal permutations the lexicographically lowest is returned, so
    ties (coincident sheets, symmetric configurations) resolve
    deterministically. Returns (sigma, squared cost).
    """
    a, b = _as_sheets(T), _as_sheets(S)
    C = cost_matrix(a, b)
    Q = C.shape[0]
    rows, cols = linear_sum_assignment(C)
    best = C[rows, cols].sum()
    tol = _tie_tol(a, b)
    sigma = np.empty(Q, dtype=int)
    used = np.zeros(Q, dtype=bool)
    fixed_cost = 0.0
    for row in range(Q):
        rest_rows = np.arange(row + 1, Q)
        for col in range(Q):
            if used[col]:
                continue
            rest_cols = np.flatnonzero(~used)
            rest_cols = rest_cols[rest_cols != col]
            total = fixed_cost + C[row, col]
            if rest_rows.size:
                sub = C[np.ix_(rest_rows, rest_cols)]
                r, c = linear_sum_assignment(sub)
                total += sub[r, c].sum()
            if total <= best + tol:
                sigma[row] = col
                used[col] = True
                fixed_cost += C[row, col]
                break
        else:  # pragma: no cover - cannot happen, the optimum is always reachable
            raise RuntimeError("lexicographic tie-breaking failed")
    return sigma, float(C[np.arange(Q), sigma].sum())


def g_distance(T, S):
    """Matching distance: min over permutations of the root-sum-square of sheet gaps."""
    C = cost_matrix(T, S)
    rows, cols = linear_sum_assignment(C)
    # summing in sorted order makes G(T, S) and G(S, T) agree to the last bit
    return float(np.sqrt(max(np.sort(C[rows, cols]).sum(), 0.0)))


@lru_cache(maxsize=None)
def permutations_lex(Q):
    """All permutations of range(Q) in lexicographic order, as an int array."""
    return np.array(list(itertools.permutations(range(Q))), dtype=np.intp).reshape(-1, Q)


def batch_matchings(A, B, chunk=8192):
    """Lexicographically-first optimal matchings for many pairs at once.

    A, B have shape (n, Q, d). Returns (perm, cost) with perm of shape (n, Q)
    such that A[i, l] is matched with B[i, perm[i, l]].
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape or A.ndim != 3:
        raise DimensionError(f"batch shapes differ: {A.shape} vs {B.shape}")
    n, Q, _ = A.shape
    if Q == 1:
        diff = A[:, 0] - B[:, 0]
        return np.zeros((n, 1), dtype=np.intp), np.einsum("ij,ij->i", diff, diff)
    if Q > _ENUM_MAX_Q:
        perms = np.empty((n, Q), dtype=np.intp)
        costs = np.empty(n)
        for i in range(n):
            perms[i], costs[i] = optimal_matching(A[i], B[i])
        return perms, costs
    P = permutations_lex(Q)
    rows = np.arange(Q)
    perms = np.empty((n, Q), dtype=np.intp)
    costs = np.empty(n)
    for start in range(0, n, chunk):
        a = A[start:start + chunk]
        b = B[start:start + chunk]
        diff = a[:, :, None, :] - b[:, None, :, :]
        C = np.einsum("nijk,nijk->nij", diff, diff)
        all_costs = C[:, rows[None, :], P].sum(axis=-1)
        best = all_costs.min(axis=1)
        tol = 1e-12 * (np.einsum("nij,nij->n", a, a) + np.einsum("nij,nij->n", b, b)) + 1e-300
        pick = np.argmax(all_costs <= (best + tol)[:, None], axis=1)
        perms[start:start + chunk] = P[pick]
        costs[start:start + chunk] = all_costs[np.arange(len(pick)), pick]
    return perms, costs


def batch_g_distance(A, B):
    return np.sqrt(np.maximum(batch_matchings(A, B)[1], 0.0))


def eta_mean(T):
    """Center of mass (1/Q) sum_l p_l."""
    return _as_sheets(T).mean(axis=0)


def spread_stats(T, tau_coin=TAU_COIN):
    """(diameter, separation, support cardinality) of a Q-point.

    separation is the smallest pairwise distance among sheets farther apart
    than tau_coin (inf when all sheets coincide).
    """
    a = _as_sheets(T)
    diff = a[:, None, :] - a[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    iu = np.triu_indices(a.shape[0], k=1)
    pair = dist[iu]
    diameter = float(pair.max()) if pair.size else 0.0
    far = pair[pair > tau_coin]
    separation = float(far.min()) if far.size else np.inf
    return diameter, separation, support_cardinality(a, tau_coin)


def support_cardinality(T, tau_coin=TAU_COIN):
    """Number of tau_coin-distinct sheet values (clusters under single linkage)."""
    a = _as_sheets(T)
    Q = a.shape[0]
    diff = a[:, None, :] - a[None, :, :]
    close = np.einsum("ijk,ijk->ij", diff, diff) <= tau_coin * tau_coin
    label = np.arange(Q)
    for _ in range(Q):
        new = np.array([label[close[i]].min() for i in range(Q)])
        if np.array_equal(new, label):
            break
        label = new
    return int(np.unique(label).size)


def batch_support_cardinality(A, tau_coin=TAU_COIN):
    """support_cardinality for an (n, Q, d) stack of Q-points."""
    A = np.asarray(A, dtype=float)
    n, Q, _ = A.shape
    if Q == 1:
        return np.ones(n, dtype=int)
    diff = A[:, :, None, :] - A[:, None, :, :]
    close = np.einsum("nijk,nijk->nij", diff, diff) <= tau_coin * tau_coin
    # single-linkage clustering by repeated min-label propagation
    label = np.broadcast_to(np.arange(Q), (n, Q)).copy()
    for _ in range(Q):
        cand = np.where(close, label[:, None, :], Q)
        new = cand.min(axis=2)
        if np.array_equal(new, label):
            break
        label = new
    srt = np.sort(label, axis=1)
    return 1 + np.count_nonzero(np.diff(srt, axis=1), axis=1)


def fiber_project(T, basis):
    """Sheetwise orthogonal projection onto span(basis)."""
    a = _as_sheets(T)
    nu = np.atleast_2d(np.asarray(basis, dtype=float))
    if nu.shape[1] != a.shape[1]:
        raise DimensionError(f"basis vectors have dimension {nu.shape[1]}, sheets have {a.shape[1]}")
    gram = nu @ nu.T
    dev = float(np.abs(gram - np.eye(nu.shape[0])).max()) if nu.size else 0.0
    if dev > ORTHO_TOL:
        raise ValueError(f"basis is not orthonormal: max Gram deviation {dev:.3e}")
    return QPoint((a @ nu.T) @ nu)
