"""Block-partitioned sparse matrix with instrumented matrix-vector products.

A measurement matrix A (r x c, CSR) is cut into an M x N grid of contiguous
row/column blocks.  Every product routed through a :class:`BlockOperator` adds
nnz(applied part) / nnz(A) to a matvec tally, so a full sweep over all blocks
costs exactly 1.0 unit.  The tally accumulates integer nonzero counts and only
divides on read, which keeps it exact and independent of evaluation order.

Full products are assembled from the block products in ascending block index,
so the blockwise path and the whole-matrix path agree bit for bit.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
from scipy import sparse


@dataclass(frozen=True)
class BlockPartition:
    """Contiguous row/column ranges covering an r x c index grid.

    ``row_bounds`` and ``col_bounds`` hold half-open ``(start, stop)`` pairs in
    ascending order; consecutive ranges must abut so the blocks tile the matrix
    exactly.
    """

    row_bounds: tuple[tuple[int, int], ...]
    col_bounds: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        for name, bounds in (("row", self.row_bounds), ("col", self.col_bounds)):
            if len(bounds) == 0:
                raise ValueError(f"empty {name} partition")
            if bounds[0][0] != 0:
                raise ValueError(f"{name} ranges must start at 0")
            for (a, b), (c, d) in zip(bounds, bounds[1:]):
                if b != c:
                    raise ValueError(f"{name} ranges must be contiguous")
            for a, b in bounds:
                if b <= a:
                    raise ValueError(f"{name} ranges must be nonempty")

    @property
    def num_row_blocks(self) -> int:
        return len(self.row_bounds)

    @property
    def num_col_blocks(self) -> int:
        return len(self.col_bounds)

    @property
    def rows(self) -> int:
        return self.row_bounds[-1][1]

    @property
    def cols(self) -> int:
        return self.col_bounds[-1][1]

    def row_range(self, i: int) -> tuple[int, int]:
        return self.row_bounds[i]

    def col_range(self, j: int) -> tuple[int, int]:
        return self.col_bounds[j]

    def row_slice(self, i: int) -> slice:
        a, b = self.row_bounds[i]
        return slice(a, b)

    def col_slice(self, j: int) -> slice:
        a, b = self.col_bounds[j]
        return slice(a, b)

    def row_sizes(self) -> tuple[int, ...]:
        return tuple(b - a for a, b in self.row_bounds)

    def col_sizes(self) -> tuple[int, ...]:
        return tuple(b - a for a, b in self.col_bounds)


def _split_even(total: int, parts: int) -> tuple[tuple[int, int], ...]:
    # near-equal contiguous ranges; the remainder goes to the first blocks
    base, rem = divmod(total, parts)
    bounds = []
    start = 0
    for k in range(parts):
        size = base + (1 if k < rem else 0)
        bounds.append((start, start + size))
        start += size
    return tuple(bounds)


def make_partition(rows: int, cols: int, num_row_blocks: int, num_col_blocks: int) -> BlockPartition:
    """Split ``rows`` x ``cols`` into an M x N grid of near-equal blocks.

    Block sizes differ by at most one; when the dimension does not divide
    evenly the first blocks take the extra element.  Raises ``ValueError``
    when M exceeds ``rows`` or N exceeds ``cols`` (or either count is < 1).
    """
    if rows < 1 or cols < 1:
        raise ValueError("matrix dimensions must be positive")
    if not (1 <= num_row_blocks <= rows):
        raise ValueError(f"row block count {num_row_blocks} not in [1, {rows}]")
    if not (1 <= num_col_blocks <= cols):
        raise ValueError(f"col block count {num_col_blocks} not in [1, {cols}]")
    return BlockPartition(_split_even(rows, num_row_blocks), _split_even(cols, num_col_blocks))


class BlockOperator:
    """Sparse matrix with a block partition and a matvec-unit counter.

    The matrix and partition are fixed at construction; only the counter
    mutates afterwards.  Block sub-matrices are extracted once so per-pair
    products are single sparse kernels.  All full products (``matvec`` /
    ``rmatvec``) are assembled from the block products in ascending block
    index, making them bitwise reproducible and identical to the blockwise
    path regardless of how the work is scheduled.
    """

    def __init__(self, matrix, partition: BlockPartition | None = None):
        csr = sparse.csr_array(matrix, dtype=np.float64)
        csr.sum_duplicates()
        csr.sort_indices()
        if csr.nnz == 0:
            raise ValueError("matrix has no nonzeros")
        rows, cols = csr.shape
        if partition is None:
            partition = make_partition(rows, cols, 1, 1)
        if partition.rows != rows or partition.cols != cols:
            raise ValueError(
                f"partition covers {partition.rows}x{partition.cols}, matrix is {rows}x{cols}"
            )
        self._csr = csr
        self._partition = partition
        self._blocks: list[list[sparse.csr_array]] = []
        covered = 0
        for i in range(partition.num_row_blocks):
            row: list[sparse.csr_array] = []
            rs = partition.row_slice(i)
            strip = csr[rs, :]
            for j in range(partition.num_col_blocks):
                blk = strip[:, partition.col_slice(j)]
                covered += blk.nnz
                row.append(blk)
            self._blocks.append(row)
        assert covered == csr.nnz, "blocks must partition the nonzeros"
        self._nnz_total = int(csr.nnz)
        self._nnz_applied = 0
        self._lock = threading.Lock()

    # --- static structure ----------------------------------------------

    @property
    def shape(self) -> tuple[int, int]:
        return self._csr.shape

    @property
    def nnz(self) -> int:
        return self._nnz_total

    @property
    def partition(self) -> BlockPartition:
        return self._partition

    @property
    def num_row_blocks(self) -> int:
        return self._partition.num_row_blocks

    @property
    def num_col_blocks(self) -> int:
        return self._partition.num_col_blocks

    def block(self, i: int, j: int) -> sparse.csr_array:
        return self._blocks[i][j]

    def block_nnz(self, i: int, j: int) -> int:
        return int(self._blocks[i][j].nnz)

    def to_dense(self) -> np.ndarray:
        return self._csr.toarray()

    def tocsr(self) -> sparse.csr_array:
        return self._csr

    def repartition(self, num_row_blocks: int, num_col_blocks: int) -> "BlockOperator":
        """New operator over the same matrix with a fresh partition and counter."""
        rows, cols = self.shape
        return BlockOperator(self._csr, make_partition(rows, cols, num_row_blocks, num_col_blocks))

    # --- counter --------------------------------------------------------

    @property
    def matvec_units(self) -> float:
        with self._lock:
            applied = self._nnz_applied
        return applied / self._nnz_total

    def _charge(self, nnz: int) -> None:
        with self._lock:
            self._nnz_applied += nnz

    # --- products -------------------------------------------------------

    def block_matvec(self, i: int, j: int, x_j: np.ndarray) -> np.ndarray:
        """A_{I_i}^{J_j} @ x_j for a column-block slice ``x_j``; charges nnz(block)/nnz(A)."""
        blk = self._blocks[i][j]
        x_j = np.asarray(x_j, dtype=np.float64)
        if x_j.shape != (blk.shape[1],):
            raise ValueError(f"expected slice of length {blk.shape[1]}, got {x_j.shape}")
        self._charge(blk.nnz)
        return blk @ x_j

    def block_matvec_transpose(self, i: int, j: int, r_i: np.ndarray) -> np.ndarray:
        """(A_{I_i}^{J_j})^T @ r_i without any scalar prefactor; charges nnz(block)/nnz(A)."""
        blk = self._blocks[i][j]
        r_i = np.asarray(r_i, dtype=np.float64)
        if r_i.shape != (blk.shape[0],):
            raise ValueError(f"expected slice of length {blk.shape[0]}, got {r_i.shape}")
        self._charge(blk.nnz)
        return blk.T @ r_i

    def matvec(self, x: np.ndarray, charge: bool = True) -> np.ndarray:
        """A @ x assembled from block products in ascending column-block order.

        Charges one full matvec unit unless ``charge`` is False (used by
        diagnostic monitors so instrumentation does not distort cost curves).
        """
        x = np.asarray(x, dtype=np.float64)
        rows, cols = self.shape
        if x.shape != (cols,):
            raise ValueError(f"expected vector of length {cols}, got {x.shape}")
        if charge:
            self._charge(self._nnz_total)
        part = self._partition
        out = np.empty(rows, dtype=np.float64)
        for i in range(part.num_row_blocks):
            acc = self._blocks[i][0] @ x[part.col_slice(0)]
            for j in range(1, part.num_col_blocks):
                acc = acc + self._blocks[i][j] @ x[part.col_slice(j)]
            out[part.row_slice(i)] = acc
        return out

    def rmatvec(self, w: np.ndarray, charge: bool = True) -> np.ndarray:
        """A^T @ w assembled from block products in ascending row-block order."""
        w = np.asarray(w, dtype=np.float64)
        rows, cols = self.shape
        if w.shape != (rows,):
            raise ValueError(f"expected vector of length {rows}, got {w.shape}")
        if charge:
            self._charge(self._nnz_total)
        part = self._partition
        out = np.empty(cols, dtype=np.float64)
        for j in range(part.num_col_blocks):
            acc = self._blocks[0][j].T @ w[part.row_slice(0)]
            for i in range(1, part.num_row_blocks):
                acc = acc + self._blocks[i][j].T @ w[part.row_slice(i)]
            out[part.col_slice(j)] = acc
        return out


def assemble_residual(y: np.ndarray, z_cache: np.ndarray) -> np.ndarray:
    """r = y - sum_j z^j with the sum taken in ascending j.

    ``z_cache`` has shape (N, r): one cached forward contribution per column
    block.  The fixed order makes the result independent of which workers
    produced the entries.
    """
    y = np.asarray(y, dtype=np.float64)
    z_cache = np.asarray(z_cache, dtype=np.float64)
    if z_cache.ndim != 2 or z_cache.shape[1] != y.shape[0]:
        raise ValueError(f"z cache shape {z_cache.shape} does not match y of length {y.shape[0]}")
    res = y.copy()
    for j in range(z_cache.shape[0]):
        res -= z_cache[j]
    return res


# --- textual matrix exchange ------------------------------------------------


def save_matrix(path, matrix) -> None:
    """Write a sparse matrix as text: `rows cols nnz` then `row col value` lines.

    Indices are 0-based; values use the shortest decimal that round-trips a
    float64, so writing is byte-deterministic and reading is exact.
    """
    coo = sparse.coo_array(sparse.csr_array(matrix, dtype=np.float64))
    order = np.lexsort((coo.coords[1], coo.coords[0]))
    rows, cols = coo.shape
    lines = [f"{rows} {cols} {coo.nnz}"]
    ri = coo.coords[0][order]
    ci = coo.coords[1][order]
    vals = coo.data[order]
    for r, c, v in zip(ri, ci, vals):
        lines.append(f"{r} {c} {float(v)!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_matrix(path) -> sparse.csr_array:
    """Read the triplet text format written by :func:`save_matrix`."""
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 3:
            raise ValueError(f"bad matrix header in {path}")
        rows, cols, nnz = (int(tok) for tok in header)
        ri = np.empty(nnz, dtype=np.int64)
        ci = np.empty(nnz, dtype=np.int64)
        vals = np.empty(nnz, dtype=np.float64)
        for k in range(nnz):
            parts = fh.readline().split()
            if len(parts) != 3:
                raise ValueError(f"bad triplet line {k + 2} in {path}")
            ri[k] = int(parts[0])
            ci[k] = int(parts[1])
            vals[k] = float(parts[2])
    if nnz and (ri.min() < 0 or ri.max() >= rows or ci.min() < 0 or ci.max() >= cols):
        raise ValueError(f"triplet index out of range in {path}")
    return sparse.csr_array(sparse.coo_array((vals, (ri, ci)), shape=(rows, cols)))
