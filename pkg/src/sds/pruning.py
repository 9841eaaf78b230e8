"""Saliency scores, mask selection and the one-shot pruners.

Masks are boolean arrays shaped like the weight, ``True`` marking a kept
entry. Ties in any ranking go to the lower flat index.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.linalg

from .calibration import feature_norms
from .errors import (
    DimensionError,
    EmptyCalibrationError,
    IllConditionedError,
    NonFiniteError,
    NotPositiveDefiniteError,
    PatternError,
)
from .linalg import F32, F64, as_matrix, check_finite, invert_spd64


class Method(str, Enum):
    SPARSEGPT = "sparsegpt"
    WANDA = "wanda"
    MAGNITUDE = "magnitude"


class Scope(str, Enum):
    LAYER = "layer"
    ROW = "row"


@dataclass(frozen=True)
class Unstructured:
    ratio: float  # fraction of weights removed
    scope: Scope = Scope.LAYER

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise PatternError(f"unstructured sparsity ratio must lie in (0, 1), got {self.ratio}")
        object.__setattr__(self, "scope", Scope(self.scope))

    def __str__(self) -> str:
        return f"{self.ratio:g}"

    @property
    def density(self) -> float:
        return 1.0 - self.ratio

    def kept_count(self, rows: int, cols: int) -> int:
        if self.scope is Scope.ROW:
            return rows * round_half_up(self.density * cols)
        return round_half_up(self.density * rows * cols)


@dataclass(frozen=True)
class NM:
    n_keep: int
    m_group: int

    def __post_init__(self):
        if not 0 < self.n_keep < self.m_group:
            raise PatternError(
                f"invalid N:M pattern {self.n_keep}:{self.m_group}; need 0 < N < M"
            )

    def __str__(self) -> str:
        return f"{self.n_keep}:{self.m_group}"

    @property
    def density(self) -> float:
        return self.n_keep / self.m_group

    def kept_count(self, rows: int, cols: int) -> int:
        return rows * (cols // self.m_group) * self.n_keep


SparsityPattern = Unstructured | NM

_NM_RE = re.compile(r"^\s*(\d+)\s*:\s*(\d+)\s*$")


def parse_pattern(text: str, scope: Scope | str = Scope.LAYER) -> SparsityPattern:
    """``"2:4"`` style N:M patterns or a float sparsity ratio such as ``"0.5"``."""
    m = _NM_RE.match(text)
    if m:
        return NM(int(m.group(1)), int(m.group(2)))
    try:
        ratio = float(text)
    except ValueError:
        raise PatternError(f"invalid pattern {text!r}; expected a ratio like 0.5 or N:M like 2:4") from None
    return Unstructured(ratio, Scope(scope))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def check_pattern(shape: tuple[int, int], pattern: SparsityPattern, layer: int | None = None) -> None:
    if isinstance(pattern, NM) and shape[1] % pattern.m_group:
        raise DimensionError(
            f"row length {shape[1]} is not divisible by the group size {pattern.m_group} "
            f"of pattern {pattern}",
            layer=layer,
        )


# ------------------------------------------------------------------ masks


def _top_k_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Keep the ``k`` best entries along the last axis (stable ties)."""
    order = np.argsort(-scores, axis=-1, kind="stable")
    mask = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(mask, order[..., :k], True, axis=-1)
    return mask


def select_mask(s, pattern: SparsityPattern) -> np.ndarray:
    s = np.asarray(s, dtype=F64)
    if s.ndim != 2:
        raise DimensionError(f"scores must be 2-D, got shape {s.shape}")
    rows, cols = s.shape
    check_pattern(s.shape, pattern)
    if isinstance(pattern, NM):
        groups = s.reshape(rows, cols // pattern.m_group, pattern.m_group)
        return _top_k_rows(groups, pattern.n_keep).reshape(rows, cols)
    if pattern.scope is Scope.ROW:
        return _top_k_rows(s, round_half_up(pattern.density * cols))
    k = pattern.kept_count(rows, cols)
    mask = np.zeros(rows * cols, dtype=bool)
    mask[np.argsort(-s.ravel(), kind="stable")[:k]] = True
    return mask.reshape(rows, cols)


def mask_conforms(mask: np.ndarray, pattern: SparsityPattern) -> bool:
    mask = np.asarray(mask, dtype=bool)
    rows, cols = mask.shape
    if isinstance(pattern, NM):
        if cols % pattern.m_group:
            return False
        counts = mask.reshape(rows, -1, pattern.m_group).sum(axis=-1)
        return bool(np.all(counts == pattern.n_keep))
    if pattern.scope is Scope.ROW:
        return bool(np.all(mask.sum(axis=1) == round_half_up(pattern.density * cols)))
    return abs(int(mask.sum()) - pattern.kept_count(rows, cols)) <= 1


def weight_conforms(w: np.ndarray, pattern: SparsityPattern) -> bool:
    """True when the nonzeros of ``w`` fit inside some mask of ``pattern``."""
    nz = np.asarray(w) != 0
    rows, cols = nz.shape
    if isinstance(pattern, NM):
        if cols % pattern.m_group:
            return False
        return bool(np.all(nz.reshape(rows, -1, pattern.m_group).sum(axis=-1) <= pattern.n_keep))
    if pattern.scope is Scope.ROW:
        return bool(np.all(nz.sum(axis=1) <= round_half_up(pattern.density * cols)))
    return int(nz.sum()) <= pattern.kept_count(rows, cols) + 1


# ------------------------------------------------------------------ Hessian


@dataclass
class HessianState:
    """Running ``(2 / n) X X^T`` over all accumulated token columns."""

    h: np.ndarray
    n_accumulated: int = 0
    damp_fraction: float = 0.01

    @classmethod
    def empty(cls, in_dim: int, damp_fraction: float = 0.01) -> "HessianState":
        return cls(np.zeros((in_dim, in_dim), dtype=F64), 0, damp_fraction)

    def add(self, x) -> "HessianState":
        x = np.asarray(x, dtype=F64)
        if x.ndim != 2 or x.shape[0] != self.h.shape[0]:
            raise DimensionError(f"expected ({self.h.shape[0]}, n) inputs, got {x.shape}")
        n = x.shape[1]
        if n == 0:
            return self
        total = self.n_accumulated + n
        self.h = self.h * (self.n_accumulated / total) + (2.0 / total) * (x @ x.T)
        self.n_accumulated = total
        return self

    def inverse(self) -> np.ndarray:
        return invert_spd64(self.h, self.damp_fraction)


def accumulate_hessian(x, damp_fraction: float = 0.01) -> HessianState:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] == 0:
        raise EmptyCalibrationError("cannot build a Hessian from zero calibration tokens")
    return HessianState.empty(x.shape[0], damp_fraction).add(x)


# ------------------------------------------------------------------ saliency


def saliency(method: Method | str, w, ctx=None) -> np.ndarray:
    """Elementwise importance scores.

    ``ctx`` is the inverse Hessian (or a :class:`HessianState`) for SparseGPT,
    scored as ``w**2 / U[c, c]**2`` with ``U`` from :func:`inverse_factor`,
    the per-feature L2 norms (or the raw inputs) for Wanda, and unused for
    magnitude.
    """
    method = Method(method)
    w = np.asarray(w, dtype=F64)
    if method is Method.SPARSEGPT:
        hinv = ctx.inverse() if isinstance(ctx, HessianState) else np.asarray(ctx, dtype=F64)
        if hinv.shape != (w.shape[1], w.shape[1]):
            raise DimensionError(f"inverse Hessian shape {hinv.shape} does not match weight {w.shape}")
        s = w**2 / np.diag(inverse_factor(hinv))[None, :] ** 2
    elif method is Method.WANDA:
        norms = _as_norms(ctx, w.shape[1])
        s = np.abs(w) * norms[None, :]
    else:
        s = np.abs(w)
    if not np.all(np.isfinite(s)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(s))[0])
        raise NonFiniteError(f"non-finite {method.value} saliency at {bad}")
    return s


def _as_norms(ctx, in_dim: int) -> np.ndarray:
    arr = np.asarray(ctx, dtype=F64)
    norms = feature_norms(arr) if arr.ndim == 2 else arr
    if norms.shape != (in_dim,):
        raise DimensionError(f"expected {in_dim} feature norms, got shape {norms.shape}")
    return norms


# ------------------------------------------------------------------ pruners


def prune_magnitude(w, pattern: SparsityPattern) -> tuple[np.ndarray, np.ndarray]:
    w = as_matrix(w, "weight")
    mask = select_mask(saliency(Method.MAGNITUDE, w), pattern)
    return np.where(mask, w, F32(0)), mask


def prune_wanda(w, x, pattern: SparsityPattern) -> tuple[np.ndarray, np.ndarray]:
    """Update-free pruning ranked by ``|w| * ||x_j||``; ``x`` is inputs or norms."""
    w = as_matrix(w, "weight")
    mask = select_mask(saliency(Method.WANDA, w, x), pattern)
    return np.where(mask, w, F32(0)), mask


def inverse_factor(hinv) -> np.ndarray:
    """Upper Cholesky factor ``U`` of the inverse Hessian (``H^-1 = U^T U``).

    ``U[c, c] ** 2`` is the inverse-Hessian diagonal of column ``c`` once all
    columns left of it are frozen, and ``U[c, c:] / U[c, c]`` the matching
    compensation row, so a single factorization serves the whole sweep.
    """
    hinv = np.asarray(hinv, dtype=F64)
    try:
        return scipy.linalg.cholesky(hinv, lower=False)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("inverse Hessian is not positive definite; increase the dampening") from exc


def prune_sparsegpt(w, hinv, pattern: SparsityPattern | None = None, *, mask=None) -> tuple[np.ndarray, np.ndarray]:
    """Column-sequential pruning with second-order compensation.

    Columns are visited left to right. The pruned entries of column ``c`` are
    zeroed and ``(w_c - 0) / U[c, c] * U[c, c:]`` is subtracted from the
    remaining columns, ``U`` being :func:`inverse_factor` of ``hinv``.
    Unstructured masks are chosen up front from ``w**2 / U[c, c]**2``; N:M
    masks at the first column of each group from the current compensated
    weights. An explicit ``mask`` bypasses selection.
    """
    W = np.array(w, dtype=F64)
    rows, cols = W.shape
    hinv = np.asarray(hinv, dtype=F64)
    if hinv.shape != (cols, cols):
        raise DimensionError(f"inverse Hessian shape {hinv.shape} does not match weight {W.shape}")
    if mask is None and pattern is None:
        raise ValueError("either pattern or mask is required")
    if mask is None:
        check_pattern(W.shape, pattern)
    diag = np.abs(np.diag(hinv))
    if np.any(diag < 1e-12):
        c = int(np.argmax(diag < 1e-12))
        raise IllConditionedError(
            f"inverse Hessian diagonal {diag[c]:.3e} at column {c} is too small; increase the dampening"
        )
    U = inverse_factor(hinv)
    u_diag = np.diag(U)
    if mask is not None:
        keep = np.asarray(mask, dtype=bool).copy()
        if keep.shape != W.shape:
            raise DimensionError(f"mask shape {keep.shape} does not match weight {W.shape}")
    elif isinstance(pattern, NM):
        keep = np.ones_like(W, dtype=bool)
    else:
        keep = select_mask(W**2 / u_diag[None, :] ** 2, pattern)
    group = pattern.m_group if mask is None and isinstance(pattern, NM) else 0

    for c in range(cols):
        d = u_diag[c]
        if not d >= 1e-12:
            raise IllConditionedError(
                f"inverse Hessian factor {d:.3e} at column {c} is too small; increase the dampening"
            )
        if group and c % group == 0:
            s = W[:, c : c + group] ** 2 / u_diag[c : c + group][None, :] ** 2
            keep[:, c : c + group] = _top_k_rows(s, pattern.n_keep)
        pruned = ~keep[:, c]
        if pruned.any():
            err = np.where(pruned, W[:, c], 0.0) / d
            W[:, c:] -= np.outer(err, U[c, c:])
            W[pruned, c] = 0.0
    W[~keep] = 0.0
    return check_finite(W.astype(F32), "sparsegpt weights"), keep


def prune_layer(method: Method | str, w, x, pattern: SparsityPattern, damp_fraction: float = 0.01):
    """Prune one layer given its calibration inputs ``x`` (in_dim, tokens)."""
    method = Method(method)
    if method is Method.SPARSEGPT:
        return prune_sparsegpt(w, accumulate_hessian(x, damp_fraction).inverse(), pattern)
    if method is Method.WANDA:
        return prune_wanda(w, x, pattern)
    return prune_magnitude(w, pattern)
