"""CSR storage, sparse x dense products and a small timing harness."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse
from threadpoolctl import threadpool_limits

from .errors import BenchmarkMismatchError, DimensionError
from .linalg import F32, F64, as_matrix, check_finite, matmul


@dataclass(frozen=True)
class CsrMatrix:
    rows: int
    cols: int
    row_ptr: np.ndarray  # int64, len rows + 1
    col_idx: np.ndarray  # int64, len nnz
    values: np.ndarray  # float32, len nnz

    @property
    def nnz(self) -> int:
        return int(self.row_ptr[-1])

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    def check(self) -> None:
        """Raise ``ValueError`` if any structural invariant is broken."""
        rp, ci = self.row_ptr, self.col_idx
        if rp.shape != (self.rows + 1,) or rp[0] != 0:
            raise ValueError("row_ptr must have rows + 1 entries starting at 0")
        if np.any(np.diff(rp) < 0):
            raise ValueError("row_ptr must be non-decreasing")
        if not (rp[-1] == len(ci) == len(self.values)):
            raise ValueError("row_ptr[-1], len(col_idx) and len(values) disagree")
        if len(ci) and (ci.min() < 0 or ci.max() >= self.cols):
            raise ValueError("column index out of range")
        for r in range(self.rows):
            seg = ci[rp[r] : rp[r + 1]]
            if np.any(np.diff(seg) <= 0):
                raise ValueError(f"column indices of row {r} are not strictly increasing")

    def to_scipy(self) -> scipy.sparse.csr_matrix:
        return scipy.sparse.csr_matrix((self.values, self.col_idx, self.row_ptr), shape=self.shape)


def to_csr(w, zero_tol: float = 0.0) -> CsrMatrix:
    w = as_matrix(w, "weight")
    keep = np.abs(w) > zero_tol
    rows, cols = np.nonzero(keep)  # row-major order, columns ascending within a row
    row_ptr = np.zeros(w.shape[0] + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=w.shape[0]), out=row_ptr[1:])
    return CsrMatrix(w.shape[0], w.shape[1], row_ptr, cols.astype(np.int64), w[rows, cols].astype(F32))


def to_dense(a: CsrMatrix) -> np.ndarray:
    out = np.zeros(a.shape, dtype=F32)
    row_of = np.repeat(np.arange(a.rows), np.diff(a.row_ptr))
    out[row_of, a.col_idx] = a.values
    return out


def spmm(a: CsrMatrix, b) -> np.ndarray:
    b = np.asarray(b)
    if b.ndim != 2 or a.cols != b.shape[0]:
        raise DimensionError(f"cannot multiply CSR {a.shape} by {b.shape}")
    csr = scipy.sparse.csr_matrix(
        (a.values.astype(F64), a.col_idx, a.row_ptr), shape=a.shape
    )
    return check_finite(np.asarray(csr @ b.astype(F64, copy=False)).astype(F32), "spmm")


@dataclass
class BenchReport:
    dense_ms: float
    sparse_ms: float
    speedup: float
    nnz_fraction: float
    rows: int
    cols: int
    tokens: int
    repeats: int
    threads: int | None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


BENCH_SCHEMA = {
    "type": "object",
    "required": ["dense_ms", "sparse_ms", "speedup", "nnz_fraction", "rows", "cols", "tokens", "repeats"],
    "properties": {
        "dense_ms": {"type": "number", "minimum": 0},
        "sparse_ms": {"type": "number", "minimum": 0},
        "speedup": {"type": "number", "minimum": 0},
        "nnz_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "rows": {"type": "integer", "minimum": 1},
        "cols": {"type": "integer", "minimum": 1},
        "tokens": {"type": "integer", "minimum": 1},
        "repeats": {"type": "integer", "minimum": 3},
        "threads": {"type": ["integer", "null"]},
    },
}


def _median_ms(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def bench(w_dense, w_sparse, x, repeats: int = 5, threads: int | None = 1) -> BenchReport:
    """Median wall time of the dense and CSR paths on the same inputs.

    ``w_dense`` and ``w_sparse`` are usually the same pruned matrix; the dense
    path multiplies it as stored, the sparse path through CSR. Outputs are
    cross-checked (1e-5 relative Frobenius) before timing. ``threads=None``
    leaves the BLAS thread pool alone.
    """
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    w_dense = as_matrix(w_dense, "dense weight")
    w_sparse = as_matrix(w_sparse, "sparse weight")
    x = as_matrix(x, "inputs")
    if w_dense.shape != w_sparse.shape:
        raise DimensionError(f"weight shapes differ: {w_dense.shape} vs {w_sparse.shape}")
    csr = to_csr(w_sparse)
    ref = matmul(w_dense, x)
    got = spmm(csr, x)
    scale = max(float(np.linalg.norm(ref)), 1e-30)
    if float(np.linalg.norm(got - ref)) > 1e-5 * scale:
        raise BenchmarkMismatchError("sparse and dense outputs disagree; benchmark aborted")
    limits = threadpool_limits(limits=threads) if threads is not None else None
    try:
        dense_ms = _median_ms(lambda: matmul(w_dense, x), repeats)
        sparse_ms = _median_ms(lambda: spmm(csr, x), repeats)
    finally:
        if limits is not None:
            limits.restore_original_limits()
    return BenchReport(
        dense_ms=dense_ms,
        sparse_ms=sparse_ms,
        speedup=dense_ms / sparse_ms if sparse_ms > 0 else float("inf"),
        nnz_fraction=csr.nnz / w_sparse.size,
        rows=w_sparse.shape[0],
        cols=w_sparse.shape[1],
        tokens=x.shape[1],
        repeats=repeats,
        threads=threads,
    )
