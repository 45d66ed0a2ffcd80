"""Linear embedding of the perturbation cascade.

Level i of the embedded vector stacks Kronecker products of cascade orders:
component (i, j) is nu_{a_0} kron ... kron nu_{a_i} where the multi-index
(a_0..a_i) runs over all tuples with a_k >= 0 and sum a_k <= c - i, ordered
graded-lex with the all-zeros tuple first.  Level 0 is the single summed
vector nu_0 + ... + nu_c.  The stacked dynamics are linear, dy/dt = A y,
with A block upper bidiagonal over levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BoundViolation, ValidationError
from .ode import QuadraticODE
from .sparse import (
    DENSE_ORACLE_CAP,
    SparseMatrix,
    dense_eigs,
    spectral_norm,
)

# default limit on the embedded dimension N (keeps direct solves desk-scale)
N_CAP = 200_000


def level_sizes(c: int) -> list[int]:
    """beta_i = 1 for i=0, else sum_{k=i}^{c} C(k, i)."""
    beta = [1]
    for i in range(1, c + 1):
        beta.append(sum(math.comb(k, i) for k in range(i, c + 1)))
    return beta


def total_dimension(n: int, c: int) -> int:
    """Closed form (n+1)^(c+1) - 1 - c*n for sum_i n^(i+1) beta_i."""
    return (n + 1) ** (c + 1) - 1 - c * n


def enumerate_level(c: int, i: int) -> list[tuple[int, ...]]:
    """Component enumeration of one level: graded-lex multi-indices.

    For i >= 1 these are all (i+1)-tuples with sum <= c - i, ordered by
    total then lexicographically, all-zeros first.  Level 0 stores the
    single summed component, conventionally the all-zeros singleton.
    """
    if i < 0 or i > c:
        raise ValidationError(f"level {i} outside 0..{c}")
    if i == 0:
        return [(0,)]
    out: list[tuple[int, ...]] = []
    for total in range(c - i + 1):
        _extend_with_sum(out, (), total, i + 1)
    return out


def _extend_with_sum(out: list, prefix: tuple[int, ...], remaining: int, length: int) -> None:
    """Append all length-sized extensions of prefix summing to exactly remaining."""
    if len(prefix) == length - 1:
        out.append(prefix + (remaining,))
        return
    for a in range(remaining + 1):
        _extend_with_sum(out, prefix + (a,), remaining - a, length)


@dataclass
class EmbeddingIndexMap:
    c: int
    n: int
    beta: list[int]
    offsets: list[int]                      # start of each level in the stacked vector
    N: int
    levels: list[list[tuple[int, ...]]]     # enumeration per level

    def __post_init__(self):
        self._rank = [
            {a: j for j, a in enumerate(level)} for level in self.levels
        ]

    def rank(self, i: int, a: tuple[int, ...]) -> int:
        if i < 0 or i > self.c:
            raise ValidationError(f"level {i} outside 0..{self.c}")
        try:
            return self._rank[i][tuple(a)]
        except KeyError:
            raise ValidationError(f"multi-index {a} not admissible at level {i}") from None

    def unrank(self, i: int, j: int) -> tuple[int, ...]:
        if i < 0 or i > self.c:
            raise ValidationError(f"level {i} outside 0..{self.c}")
        if j < 0 or j >= self.beta[i]:
            raise ValidationError(f"rank {j} outside level {i} (beta={self.beta[i]})")
        return self.levels[i][j]

    def block_start(self, i: int, j: int) -> int:
        return self.offsets[i] + j * self.n ** (i + 1)

    def block_slice(self, i: int, j: int) -> slice:
        start = self.block_start(i, j)
        return slice(start, start + self.n ** (i + 1))

    def level_slice(self, i: int) -> slice:
        return slice(self.offsets[i], self.offsets[i] + self.beta[i] * self.n ** (i + 1))

    def level_of_position(self, pos: int) -> int:
        for i in range(self.c + 1):
            if pos < self.offsets[i] + self.beta[i] * self.n ** (i + 1):
                return i
        raise ValidationError(f"position {pos} outside vector of length {self.N}")


def build_index_map(c: int, n: int, cap: int = N_CAP) -> EmbeddingIndexMap:
    if c < 0 or n < 1:
        raise ValidationError("need c >= 0 and n >= 1")
    N = total_dimension(n, c)
    if N > cap:
        raise ValidationError(f"embedded dimension {N} exceeds cap {cap}")
    beta = level_sizes(c)
    levels = [enumerate_level(c, i) for i in range(c + 1)]
    for i, level in enumerate(levels):
        if len(level) != beta[i]:
            raise ValidationError(
                f"enumeration bug: level {i} has {len(level)} tuples, beta says {beta[i]}"
            )
    offsets, pos = [], 0
    for i in range(c + 1):
        offsets.append(pos)
        pos += beta[i] * n ** (i + 1)
    if pos != N:
        raise ValidationError(f"offset bookkeeping bug: {pos} != {N}")
    return EmbeddingIndexMap(c=c, n=n, beta=beta, offsets=offsets, N=N, levels=levels)


@dataclass
class EmbeddedSystem:
    index: EmbeddingIndexMap
    A: SparseMatrix
    y_in: np.ndarray
    norm_A: float


def _add_kron_factor(A: SparseMatrix, mat: SparseMatrix, n: int, slots_left: int,
                     slots_right: int, col_digits: int, row_off: int, col_off: int) -> None:
    """Add I_n^(kron slots_left) kron mat kron I_n^(kron slots_right).

    mat occupies one digit on the row side and col_digits digits on the
    column side (1 for F1-like, 2 for F2-like blocks).
    """
    if mat.nnz == 0:
        return
    n_hi = n ** slots_left
    n_lo = n ** slots_right
    row_hi_stride = n ** (slots_right + 1)
    col_hi_stride = n ** (slots_right + col_digits)
    base_r = (np.arange(n_hi)[:, None] * row_hi_stride + np.arange(n_lo)[None, :]).ravel()
    base_c = (np.arange(n_hi)[:, None] * col_hi_stride + np.arange(n_lo)[None, :]).ravel()
    rows = (base_r[:, None] + mat.row[None, :] * n_lo).ravel() + row_off
    cols = (base_c[:, None] + mat.col[None, :] * n_lo).ravel() + col_off
    vals = np.broadcast_to(mat.val, (base_r.size, mat.val.size)).ravel()
    A.add_batch(rows, cols, vals)


def assemble_A(ode: QuadraticODE, c: int, cap: int = N_CAP,
               norm_tol: float = 1e-10) -> EmbeddedSystem:
    """Assemble the block upper bidiagonal embedding matrix and y(0).

    Diagonal blocks: identity-replicated Kronecker sums of F1.  Superdiagonal
    blocks: level 0 couples to every level-1 component through a copy of F2;
    for i >= 1, splitting slot k of a row multi-index into (l, a_k-1-l)
    targets the level-(i+1) component with that refined multi-index through
    I^k kron F2 kron I^(i-k).  Colliding (row, column-block) contributions sum.
    """
    index = build_index_map(c, ode.n, cap)
    n = ode.n
    A = SparseMatrix(index.N, index.N)

    for i in range(c + 1):
        blk = n ** (i + 1)
        for j in range(index.beta[i]):
            off = index.block_start(i, j)
            for k in range(i + 1):
                _add_kron_factor(A, ode.F1, n, k, i - k, 1, off, off)

    if ode.F2.nnz:
        if c >= 1:
            row_off = index.block_start(0, 0)
            for jp in range(index.beta[1]):
                col_off = index.block_start(1, jp)
                A.add_batch(ode.F2.row + row_off, ode.F2.col + col_off, ode.F2.val)
        for i in range(1, c):
            for j, a in enumerate(index.levels[i]):
                row_off = index.block_start(i, j)
                for k in range(i + 1):
                    for split in range(a[k]):
                        refined = a[:k] + (split, a[k] - 1 - split) + a[k + 1:]
                        jp = index.rank(i + 1, refined)
                        col_off = index.block_start(i + 1, jp)
                        _add_kron_factor(A, ode.F2, n, k, i - k, 2, row_off, col_off)

    A.finalize()
    y_in = assemble_y_in(ode, index)
    norm_A = spectral_norm(A, tol=norm_tol) if A.nnz else 0.0
    return EmbeddedSystem(index=index, A=A, y_in=y_in, norm_A=norm_A)


def assemble_y_in(ode: QuadraticODE, index: EmbeddingIndexMap) -> np.ndarray:
    """Initial vector: block (i, 0) holds u_in^(kron i+1), all else zero."""
    y = np.zeros(index.N)
    power = ode.u_in.copy()
    y[index.block_slice(0, 0)] = power
    for i in range(1, index.c + 1):
        power = np.kron(power, ode.u_in)
        y[index.block_slice(i, 0)] = power
    return y


def build_embedded_vector(index: EmbeddingIndexMap, nus: np.ndarray) -> np.ndarray:
    """Stack one time slice of the cascade into the embedded layout.

    nus has shape (c+1, n).  Level 0 gets the order sum; component (i, j)
    gets the Kronecker chain over its multi-index.
    """
    if nus.shape != (index.c + 1, index.n):
        raise ValidationError(f"need cascade slice of shape ({index.c + 1}, {index.n})")
    y = np.zeros(index.N)
    y[index.block_slice(0, 0)] = nus.sum(axis=0)
    for i in range(1, index.c + 1):
        for j, a in enumerate(index.levels[i]):
            block = nus[a[0]]
            for digit in a[1:]:
                block = np.kron(block, nus[digit])
            y[index.block_slice(i, j)] = block
    return y


def embedded_norm_profile(index: EmbeddingIndexMap, order_norms: np.ndarray,
                          level0_norms: np.ndarray) -> np.ndarray:
    """||y(t)|| over a grid from per-order norms, no Kronecker materialization.

    order_norms: (c+1, len(ts)) array of ||nu_i(t)||; level0_norms:
    ||sum_i nu_i(t)|| per grid point.  Kronecker norms multiply, blocks are
    orthogonal components of the stacked vector.
    """
    total_sq = level0_norms ** 2
    for i in range(1, index.c + 1):
        for a in index.levels[i]:
            total_sq = total_sq + np.prod(order_norms[list(a), :], axis=0) ** 2
    return np.sqrt(total_sq)


def row_pattern_Bm(F1: SparseMatrix, m: int, row: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Nonzero-column pattern of one row of B(m) = sum_j I^j kron F1 kron I^(m-j).

    row is the digit string (j_m, ..., j_0), most significant first.  The
    diagonal of F1 counts as structurally nonzero.  Recursion: columns that
    replace the leading digit with a pre-diagonal neighbour, then the B(m-1)
    pattern of the remaining digits under an unchanged leading digit, then
    the post-diagonal leading replacements.
    """
    n = F1.rows
    row = tuple(int(d) for d in row)
    if len(row) != m + 1:
        raise ValidationError(f"row needs {m + 1} digits, got {len(row)}")
    if any(d < 0 or d >= n for d in row):
        raise ValidationError(f"digits must lie in [0, {n})")

    cols_cache: dict[int, list[int]] = {}

    def cols_of(j: int) -> list[int]:
        if j not in cols_cache:
            pattern = set(F1.col[F1.row == j].tolist())
            pattern.add(j)  # structural diagonal
            cols_cache[j] = sorted(pattern)
        return cols_cache[j]

    def rec(digits: tuple[int, ...]) -> list[tuple[int, ...]]:
        lead = digits[0]
        cols = cols_of(lead)
        gpos = cols.index(lead)
        if len(digits) == 1:
            return [(k,) for k in cols]
        out = [(k,) + digits[1:] for k in cols[:gpos]]
        out.extend((lead,) + sub for sub in rec(digits[1:]))
        out.extend((k,) + digits[1:] for k in cols[gpos + 1:])
        return out

    return rec(row)


def structural_report(sys: EmbeddedSystem, ode: QuadraticODE, norm_F1: float,
                      norm_F2: float, dense_cap: int = DENSE_ORACLE_CAP) -> dict:
    """Sparsity, norm, and eigenvalue diagnostics of the assembled matrix.

    Violations of the proved bounds are assembly bugs and raise; the report
    also carries the softer O(s c^2) witness comparison for the caller.
    """
    index, A = sys.index, sys.A
    c, n, s = index.c, index.n, ode.s
    report: dict = {"N": index.N, "c": c, "n": n, "s": s}

    lvl_bounds = np.array(
        [index.offsets[i] + index.beta[i] * n ** (i + 1) for i in range(c + 1)]
    )
    row_lvl = np.searchsorted(lvl_bounds, A.row, side="right")
    col_lvl = np.searchsorted(lvl_bounds, A.col, side="right")
    if ((col_lvl != row_lvl) & (col_lvl != row_lvl + 1)).any():
        raise BoundViolation("entries outside the block bidiagonal structure")

    max_row = int(A.row_nonzeros().max()) if A.nnz else 0
    max_col = int(A.col_nonzeros().max()) if A.nnz else 0
    witness = s * c * c + c
    # proved per-level counts: level-0 rows see F1 plus beta_1 copies of F2;
    # any other row sees at most (i+1)s diagonal plus (c-i)s coupling entries
    beta1 = index.beta[1] if c >= 1 else 0
    tight_row = max(s * (1 + beta1), (c + 1) * s) if c >= 1 else s
    tight_col = (2 * c + 1) * s if c >= 1 else s
    report["max_row_nnz"] = max_row
    report["max_col_nnz"] = max_col
    report["sparsity_witness"] = witness
    report["sparsity_within_witness"] = max(max_row, max_col) <= witness
    if max_row > tight_row or max_col > tight_col:
        raise BoundViolation(
            f"sparsity {max(max_row, max_col)} exceeds the proved bound "
            f"(rows<={tight_row}, cols<={tight_col})"
        )

    norm_bound = (c + 1) * (norm_F1 + norm_F2)
    report["norm_A"] = sys.norm_A
    report["norm_A_bound"] = norm_bound
    if sys.norm_A > norm_bound * (1 + 1e-9):
        raise BoundViolation(
            f"||A|| = {sys.norm_A:.6g} exceeds (c+1)(||F1||+||F2||) = {norm_bound:.6g}"
        )

    if index.N * index.N <= dense_cap:
        gamma = dense_eigs(A.to_dense(dense_cap), dense_cap)
        max_re = float(gamma.real.max())
        report["max_re_eigenvalue"] = max_re
        report["eigenvalue_checked"] = True
        if max_re >= 0:
            raise BoundViolation(f"embedded matrix has Re(eigenvalue) = {max_re:.3e} >= 0")
    else:
        report["max_re_eigenvalue"] = None
        report["eigenvalue_checked"] = False
    return report
