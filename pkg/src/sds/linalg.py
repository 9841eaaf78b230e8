"""Dense linear algebra primitives and the seeded generator.

Matrices are plain 2-D ``numpy`` arrays of ``float32``. Products and solves
are carried out in ``float64`` and rounded to ``float32`` on the way out.

Random numbers come from a counter-based SplitMix64 stream: the ``k``-th
64-bit word for seed ``s`` is ``mix(s + (k + 1) * 0x9E3779B97F4A7C15)`` with
the standard SplitMix64 finalizer. Uniforms take the top 53 bits; normals use
the Box-Muller transform on consecutive uniform pairs. The integer stream is
bit-identical on every platform.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import DimensionError, NonFiniteError, NotPositiveDefiniteError

F32 = np.float32
F64 = np.float64

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a C-contiguous 2-D float32 array."""
    arr = np.ascontiguousarray(a, dtype=F32)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def check_finite(a: np.ndarray, name: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.isfinite(a))[0]
        raise NonFiniteError(f"{name} has a non-finite value at {tuple(int(i) for i in bad)}")
    return a


class Rng:
    """Counter-based SplitMix64 generator.

    Every draw advances an internal counter, so two generators with the same
    seed that make the same calls return the same values.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = 0

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def next_u64(self, n: int) -> np.ndarray:
        k = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        z = np.uint64(self.seed) + k * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))

    def uniform(self, n: int) -> np.ndarray:
        """``n`` float64 values in [0, 1)."""
        return (self.next_u64(n) >> np.uint64(11)).astype(F64) * (1.0 / 9007199254740992.0)

    def normal(self, n: int) -> np.ndarray:
        """``n`` standard normal float64 values (Box-Muller)."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))  # 1 - u lies in (0, 1]
        theta = 2.0 * np.pi * u[1::2]
        out = np.empty(2 * pairs, dtype=F64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.next_u64(n), kind="stable")

    def spawn(self, offset: int) -> "Rng":
        return Rng(self.seed + offset)


def gaussian(rng: Rng, rows: int, cols: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    z = rng.normal(rows * cols).reshape(rows, cols)
    return (mean + std * z).astype(F32)


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    c = np.matmul(a.astype(F64, copy=False), b.astype(F64, copy=False))
    return check_finite(c.astype(F32), "matmul")


def is_symmetric(h: np.ndarray, rtol: float = 1e-5) -> bool:
    scale = max(float(np.max(np.abs(h))), np.finfo(F32).tiny)
    return float(np.max(np.abs(h - h.T))) <= rtol * scale


def invert_spd(h, damp: float = 0.0) -> np.ndarray:
    """Inverse of ``H + damp * mean(diag(H)) * I`` via Cholesky.

    Raises :class:`NotPositiveDefiniteError` when the dampened matrix has no
    Cholesky factor; the caller should retry with a larger ``damp``.
    """
    return invert_spd64(h, damp).astype(F32)


def invert_spd64(h, damp: float = 0.0) -> np.ndarray:
    h = np.asarray(h, dtype=F64)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {h.shape}")
    if damp < 0:
        raise ValueError(f"damp must be non-negative, got {damp}")
    if not is_symmetric(h):
        raise DimensionError("matrix is not symmetric within 1e-5 relative tolerance")
    n = h.shape[0]
    if n == 0:
        return np.zeros((0, 0), dtype=F64)
    hd = h.copy()
    hd[np.diag_indices(n)] += damp * float(np.mean(np.diag(h)))
    try:
        factor = scipy.linalg.cho_factor(hd, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(
            f"Cholesky factorization failed with damp={damp}; increase the dampening"
        ) from exc
    inv = scipy.linalg.cho_solve(factor, np.eye(n))
    inv = 0.5 * (inv + inv.T)
    return check_finite(inv, "inverse")
