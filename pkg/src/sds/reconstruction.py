"""Layer-wise weight reconstruction: re-dense regrowth and soft-mask adjustment.

Both objectives share the data term ``mean(((W - W_dense) X) ** 2)``, averaged
over the ``d_out * n_tokens`` output entries. Writing ``G = X X^T`` the term is
``tr(D G D^T) / (n d_out)`` with gradient ``2 D G / (n d_out)`` where
``D = W - W_dense``, so only the ``d_in x d_in`` Gram matrix is touched per step.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from enum import Enum

import numpy as np

from .errors import ConfigError, DimensionError, DivergenceError
from .linalg import F32, F64, check_finite
from .pruning import SparsityPattern, check_pattern, select_mask


class Optimizer(str, Enum):
    GD = "gd"
    ADAM = "adam"


class L2Form(str, Enum):
    SQUARED = "squared"  # lambda2 * mean(W**2)
    NORM = "norm"  # lambda2 * sqrt(mean(W**2))


class Routing(str, Enum):
    MASKED = "masked"
    STRAIGHT_THROUGH = "straight-through"


@dataclass(frozen=True)
class ReconConfig:
    epochs: int = 200
    lr: float = 0.1
    lambda1: float = 0.1
    lambda2: float = 0.1
    use_weight_reg: bool = True
    optimizer: Optimizer = Optimizer.ADAM
    l2_form: L2Form = L2Form.SQUARED
    routing: Routing = Routing.MASKED
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))
        object.__setattr__(self, "l2_form", L2Form(self.l2_form))
        object.__setattr__(self, "routing", Routing(self.routing))
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("regularization weights must be non-negative")

    def to_dict(self) -> dict:
        return {k: (v.value if isinstance(v, Enum) else v) for k, v in asdict(self).items()}


class _Adam:
    """Adam with per-entry step counts so frozen entries keep their state."""

    def __init__(self, shape, cfg: ReconConfig):
        self.cfg = cfg
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = np.zeros(shape)

    def step(self, w: np.ndarray, g: np.ndarray, where: np.ndarray | None = None) -> None:
        c = self.cfg
        if where is None:
            where = np.ones(w.shape, dtype=bool)
        self.t[where] += 1
        self.m[where] = c.beta1 * self.m[where] + (1 - c.beta1) * g[where]
        self.v[where] = c.beta2 * self.v[where] + (1 - c.beta2) * g[where] ** 2
        t = self.t[where]
        m_hat = self.m[where] / (1 - c.beta1**t)
        v_hat = self.v[where] / (1 - c.beta2**t)
        w[where] -= c.lr * m_hat / (np.sqrt(v_hat) + c.eps)


def _as64(a, name: str) -> np.ndarray:
    arr = np.array(a, dtype=F64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def _prepare(w_dense, w_start, x):
    wd = _as64(w_dense, "dense weight")
    w = _as64(w_start, "start weight")
    x = _as64(x, "inputs")
    if wd.shape != w.shape:
        raise DimensionError(f"weight shapes differ: {wd.shape} vs {w.shape}")
    if x.shape[0] != wd.shape[1]:
        raise DimensionError(f"inputs have {x.shape[0]} features, weight expects {wd.shape[1]}")
    if x.shape[1] == 0:
        raise DimensionError("no calibration tokens")
    return wd, w, x @ x.T, x.shape[1]


def data_term(w, w_dense, gram, n_tokens) -> tuple[float, np.ndarray]:
    """Mean squared output deviation and its gradient with respect to ``w``."""
    d = w - w_dense
    dg = d @ gram
    scale = 1.0 / (n_tokens * w.shape[0])
    return float(np.sum(dg * d)) * scale, 2.0 * scale * dg


def reg_term(w: np.ndarray, cfg: ReconConfig, include_l1: bool = True) -> tuple[float, np.ndarray]:
    numel = w.size
    loss, grad = 0.0, np.zeros_like(w)
    if include_l1 and cfg.lambda1:
        loss += cfg.lambda1 * float(np.mean(np.abs(w)))
        grad += cfg.lambda1 * np.sign(w) / numel
    if cfg.lambda2:
        if cfg.l2_form is L2Form.SQUARED:
            loss += cfg.lambda2 * float(np.mean(w**2))
            grad += 2.0 * cfg.lambda2 * w / numel
        else:
            rms = float(np.sqrt(np.mean(w**2)))
            loss += cfg.lambda2 * rms
            if rms > 0:
                grad += cfg.lambda2 * w / (numel * rms)
    return loss, grad


def redense_objective(w, w_dense, x, cfg: ReconConfig) -> float:
    wd, w, gram, n = _prepare(w_dense, w, x)
    loss, _ = data_term(w, wd, gram, n)
    if cfg.use_weight_reg:
        loss += reg_term(w, cfg)[0]
    return loss


def redense(w_dense, w_sparse, x, cfg: ReconConfig = ReconConfig(), history: list | None = None) -> np.ndarray:
    """Regrow a sparse layer toward the dense layer's outputs on inputs ``x``.

    Starts from ``w_sparse``; pruned zeros are free to become nonzero. With
    gradient descent the L1 term is applied as a proximal soft-threshold,
    otherwise as a subgradient. ``history`` (if given) receives the objective
    value before each step and after the last one.
    """
    wd, w, gram, n = _prepare(w_dense, w_sparse, x)
    use_reg = cfg.use_weight_reg
    proximal_l1 = cfg.optimizer is Optimizer.GD and use_reg and cfg.lambda1 > 0
    adam = _Adam(w.shape, cfg) if cfg.optimizer is Optimizer.ADAM else None
    threshold = cfg.lr * cfg.lambda1 / w.size

    for step in range(cfg.epochs + 1):
        loss, grad = data_term(w, wd, gram, n)
        if use_reg:
            rloss, rgrad = reg_term(w, cfg, include_l1=not proximal_l1)
            loss += rloss
            grad += rgrad
            if proximal_l1:
                loss += cfg.lambda1 * float(np.mean(np.abs(w)))
        if not np.isfinite(loss):
            raise DivergenceError(f"re-dense objective diverged at step {step}", step=step)
        if history is not None:
            history.append(loss)
        if step == cfg.epochs:
            break
        if adam is not None:
            adam.step(w, grad)
        else:
            w -= cfg.lr * grad
            if proximal_l1:
                w = np.sign(w) * np.maximum(np.abs(w) - threshold, 0.0)
    return check_finite(w.astype(F32), "re-dense weights")


def soft_mask_objective(w, w_dense, x, mask) -> tuple[float, np.ndarray]:
    """Masked data term and its gradient w.r.t. the dense buffer (fixed mask)."""
    wd, w, gram, n = _prepare(w_dense, w, x)
    mask = np.asarray(mask, dtype=bool)
    loss, g = data_term(np.where(mask, w, 0.0), wd, gram, n)
    return loss, np.where(mask, g, 0.0)


def adjust_soft_mask(
    w_dense,
    w_sparse2,
    x,
    pattern: SparsityPattern,
    cfg: ReconConfig = ReconConfig(use_weight_reg=False),
    history: list | None = None,
    on_step=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Fit a pruned layer to the dense outputs while re-selecting its mask.

    A dense buffer starts at ``w_sparse2``. Every step re-selects the mask from
    the buffer magnitudes under ``pattern``, evaluates the masked data term,
    and updates the buffer. With masked routing only masked-in entries move;
    masked-out entries keep their values and may re-enter later. Weight
    regularization is never applied here.
    """
    wd, w, gram, n = _prepare(w_dense, w_sparse2, x)
    check_pattern(w.shape, pattern)
    adam = _Adam(w.shape, cfg) if cfg.optimizer is Optimizer.ADAM else None
    straight = cfg.routing is Routing.STRAIGHT_THROUGH

    for step in range(cfg.epochs):
        mask = select_mask(np.abs(w), pattern)
        if on_step is not None:
            on_step(step, mask)
        loss, g = data_term(np.where(mask, w, 0.0), wd, gram, n)
        if not np.isfinite(loss):
            raise DivergenceError(f"soft-mask adjustment diverged at step {step}", step=step)
        if history is not None:
            history.append(loss)
        where = None if straight else mask
        if adam is not None:
            adam.step(w, g, where)
        else:
            w -= cfg.lr * (g if straight else np.where(mask, g, 0.0))
    mask = select_mask(np.abs(w), pattern)
    if on_step is not None:
        on_step(cfg.epochs, mask)
    out = np.where(mask, w, 0.0)
    if history is not None:
        history.append(data_term(out, wd, gram, n)[0])
    return check_finite(out.astype(F32), "adjusted weights"), mask


def early_exit_check(err_initial: float, err_second_oneshot: float) -> bool:
    """True (skip adjustment) when the second one-shot prune is no worse."""
    return err_second_oneshot <= err_initial


def adjust_config(cfg: ReconConfig) -> ReconConfig:
    return replace(cfg, use_weight_reg=False)
