"""Calibration inputs and per-layer activation traces.

Three data modes decide which model's forward pass supplies the input of each
layer during layer-wise optimization:

* ``DD`` -- the dense model (no error accumulation).
* ``SD`` -- the working sparse model, forwarded once (errors accumulate).
* ``KD`` -- like ``SD``, but the caller re-forwards each layer after updating
  it, so layer ``l + 1`` sees the output of the already-updated layer ``l``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DataError, DimensionError
from .linalg import F32, F64, Rng, as_matrix
from .model import LayerStack, forward_all, read_container

CALIB_TENSOR = "calib.x0"
CALIB_META_TENSOR = "calib.meta"


class DataMode(str, Enum):
    DD = "dd"
    SD = "sd"
    KD = "kd"


@dataclass(frozen=True)
class CalibrationSet:
    x0: np.ndarray  # (in_dim, n_tokens)
    seed: int = 0
    correlation: float | None = None  # None when loaded without generator metadata

    def __post_init__(self):
        object.__setattr__(self, "x0", as_matrix(self.x0, "calibration"))

    @property
    def in_dim(self) -> int:
        return self.x0.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.x0.shape[1]

    def is_full_rank(self) -> bool:
        return self.n_tokens >= self.in_dim

    def split(self, heldout_fraction: float) -> tuple[np.ndarray, np.ndarray]:
        """Deterministic (held-in, held-out) token-column split."""
        if not 0 <= heldout_fraction < 1:
            raise ValueError(f"heldout_fraction must be in [0, 1), got {heldout_fraction}")
        idx_in, idx_out = split_indices(self.n_tokens, heldout_fraction, self.seed)
        return self.x0[:, idx_in], self.x0[:, idx_out]

    def to_entries(self) -> dict[str, np.ndarray]:
        entries = {CALIB_TENSOR: self.x0}
        if self.correlation is not None:
            entries[CALIB_META_TENSOR] = np.array([self.correlation], dtype=F32)
        return entries


def split_indices(n_tokens: int, heldout_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    n_out = int(np.floor(heldout_fraction * n_tokens))
    perm = Rng(seed).spawn(0x5EED).permutation(n_tokens)
    return np.sort(perm[: n_tokens - n_out]), np.sort(perm[n_tokens - n_out :])


def correlation_factor(in_dim: int, correlation: float) -> np.ndarray:
    """Lower Cholesky factor of ``(1 - rho) I + rho 11^T``.

    For ``rho = 1`` the matrix is singular; its factor is the first column of
    ones, which makes every feature row equal.
    """
    if not 0.0 <= correlation <= 1.0:
        raise ValueError(f"correlation must lie in [0, 1], got {correlation}")
    if correlation == 1.0:
        factor = np.zeros((in_dim, in_dim))
        factor[:, 0] = 1.0
        return factor
    cov = (1.0 - correlation) * np.eye(in_dim) + correlation * np.ones((in_dim, in_dim))
    return np.linalg.cholesky(cov)


def make_calibration(rng: Rng | int, in_dim: int, n_tokens: int, correlation: float = 0.5) -> CalibrationSet:
    if not isinstance(rng, Rng):
        rng = Rng(rng)
    if in_dim < 1 or n_tokens < 1:
        raise ValueError("in_dim and n_tokens must be positive")
    seed = rng.seed
    g = rng.normal(in_dim * n_tokens).reshape(in_dim, n_tokens)
    x0 = correlation_factor(in_dim, correlation) @ g
    return CalibrationSet(x0.astype(F32), seed=seed, correlation=correlation)


def load_calibration(path, seed: int = 0) -> CalibrationSet:
    entries = read_container(path)
    if CALIB_TENSOR not in entries:
        raise DataError(f"{path} has no {CALIB_TENSOR!r} tensor")
    x0 = entries[CALIB_TENSOR]
    if x0.ndim != 2:
        raise DimensionError(f"{CALIB_TENSOR} must be 2-D, got shape {x0.shape}")
    corr = None
    if CALIB_META_TENSOR in entries:
        corr = float(entries[CALIB_META_TENSOR].reshape(-1)[0])
    return CalibrationSet(x0, seed=seed, correlation=corr)


@dataclass
class ActivationTrace:
    per_layer_inputs: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.per_layer_inputs)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.per_layer_inputs[i]

    def refresh_after(self, model: LayerStack, layer_idx: int) -> None:
        """Re-forward layer ``layer_idx`` of ``model`` into the next slot (KD mode)."""
        if layer_idx + 1 < len(self.per_layer_inputs):
            self.per_layer_inputs[layer_idx + 1] = model.layers[layer_idx](self.per_layer_inputs[layer_idx])


def collect_inputs(dense: LayerStack, working: LayerStack, x0, mode: DataMode | str) -> ActivationTrace:
    mode = DataMode(mode)
    if not dense.same_shape(working):
        raise DimensionError("dense and working models have different shapes")
    x0 = as_matrix(x0, "calibration")
    if x0.shape[0] != dense.in_dim:
        raise DimensionError(f"calibration has {x0.shape[0]} features, model expects {dense.in_dim}")
    source = dense if mode is DataMode.DD else working
    return ActivationTrace(forward_all(source, x0)[:-1])


def feature_norms(x: np.ndarray) -> np.ndarray:
    """L2 norm of each input feature (row) across tokens."""
    return np.sqrt(np.sum(np.asarray(x, dtype=F64) ** 2, axis=1))
