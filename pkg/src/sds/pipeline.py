"""Sparse-dense-sparse orchestration, error reports and weight histograms."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .calibration import CalibrationSet, DataMode, collect_inputs, make_calibration
from .errors import ConfigError, DataError, SdsError, attach_context
from .linalg import F64, Rng
from .model import LayerStack, forward_all
from .pruning import Method, SparsityPattern, Unstructured, check_pattern, prune_layer
from .reconstruction import ReconConfig, adjust_config, adjust_soft_mask, early_exit_check, redense

log = logging.getLogger(__name__)

STAGES = ("initial", "redense", "second_oneshot", "final")


@dataclass(frozen=True)
class SdsConfig:
    method: Method = Method.SPARSEGPT
    pattern: SparsityPattern = field(default_factory=lambda: Unstructured(0.5))
    data_mode: DataMode = DataMode.SD
    recon: ReconConfig = field(default_factory=ReconConfig)
    damp_fraction: float = 0.01
    msd_seed_offsets: tuple[int, int, int] | None = None  # (initial, redense, adjust)
    early_exit: bool = True
    heldout_fraction: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "data_mode", DataMode(self.data_mode))
        if self.damp_fraction < 0:
            raise ConfigError("damp_fraction must be non-negative")
        if not 0 <= self.heldout_fraction < 1:
            raise ConfigError("heldout_fraction must lie in [0, 1)")
        if self.msd_seed_offsets is not None:
            offsets = tuple(int(o) for o in self.msd_seed_offsets)
            if len(offsets) != 3:
                raise ConfigError("msd_seed_offsets needs one offset per stage (3)")
            object.__setattr__(self, "msd_seed_offsets", offsets)

    def to_dict(self) -> dict:
        return {
            "method": self.method.value,
            "pattern": str(self.pattern),
            "scope": getattr(self.pattern, "scope", None) and self.pattern.scope.value,
            "data_mode": self.data_mode.value,
            "recon": self.recon.to_dict(),
            "damp_fraction": self.damp_fraction,
            "msd_seed_offsets": list(self.msd_seed_offsets) if self.msd_seed_offsets else None,
            "early_exit": self.early_exit,
            "heldout_fraction": self.heldout_fraction,
        }


@dataclass
class LayerRecord:
    layer_idx: int
    stage: str
    mse_vs_dense_heldin: float
    mse_vs_dense_heldout: float
    nnz_fraction: float


@dataclass
class StageRecord:
    stage: str
    mse_vs_dense_heldin: float
    mse_vs_dense_heldout: float
    nnz_fraction: float


@dataclass
class PruneReport:
    layers: list[LayerRecord] = field(default_factory=list)
    model: list[StageRecord] = field(default_factory=list)
    early_exit_taken: bool = False
    config: dict = field(default_factory=dict)
    wall_times: dict[str, float] = field(default_factory=dict)

    def stage(self, name: str) -> StageRecord:
        for rec in self.model:
            if rec.stage == name:
                return rec
        raise KeyError(name)

    def layer_records(self, stage: str) -> list[LayerRecord]:
        return [r for r in self.layers if r.stage == stage]

    def to_dict(self) -> dict:
        return asdict(self)

    def numerics(self) -> dict:
        """Everything except timings; identical runs give identical values."""
        d = self.to_dict()
        d.pop("wall_times")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "PruneReport":
        return cls(
            layers=[LayerRecord(**r) for r in d["layers"]],
            model=[StageRecord(**r) for r in d["model"]],
            early_exit_taken=d["early_exit_taken"],
            config=d["config"],
            wall_times=d["wall_times"],
        )


class _Evaluator:
    """Output deviation of a candidate model from the dense model."""

    def __init__(self, dense: LayerStack, x_in: np.ndarray, x_out: np.ndarray):
        self.x_in, self.x_out = x_in, x_out
        self.dense_in = forward_all(dense, x_in)[1:]
        self.dense_out = forward_all(dense, x_out)[1:] if x_out.shape[1] else None

    @staticmethod
    def _mses(acts, ref) -> list[float]:
        return [float(np.mean((a.astype(F64) - r.astype(F64)) ** 2)) for a, r in zip(acts, ref)]

    def layer_mse(self, model: LayerStack) -> tuple[list[float], list[float]]:
        held_in = self._mses(forward_all(model, self.x_in)[1:], self.dense_in)
        if self.dense_out is None:
            return held_in, [float("nan")] * len(held_in)
        return held_in, self._mses(forward_all(model, self.x_out)[1:], self.dense_out)

    def model_mse_heldin(self, model: LayerStack) -> float:
        return self.layer_mse(model)[0][-1]


def nnz_fraction(w: np.ndarray) -> float:
    return float(np.count_nonzero(w)) / w.size


def model_error(dense: LayerStack, model: LayerStack, x) -> float:
    """Mean squared deviation of the final outputs from the dense model."""
    ref = forward_all(dense, x)[-1].astype(F64)
    return float(np.mean((forward_all(model, x)[-1].astype(F64) - ref) ** 2))


def _stage_inputs(calib: CalibrationSet, cfg: SdsConfig, stage_idx: int, x_in: np.ndarray) -> np.ndarray:
    if cfg.msd_seed_offsets is None:
        return x_in
    if calib.correlation is None:
        raise ConfigError("multiple-sample mode needs a generated calibration set (correlation unknown)")
    seed = calib.seed + cfg.msd_seed_offsets[stage_idx]
    fresh = make_calibration(Rng(seed), calib.in_dim, calib.n_tokens, calib.correlation)
    return fresh.x0[:, : x_in.shape[1]]


def _per_layer(stage: str, model: LayerStack, fn):
    out = []
    for i, layer in enumerate(model.layers):
        t0 = time.perf_counter()
        try:
            out.append(fn(i, layer))
        except SdsError as err:
            raise attach_context(err, layer=i, stage=stage)
        log.info("%s layer %d done in %.3fs", stage, i, time.perf_counter() - t0)
    return out


def validate(model: LayerStack, calib: CalibrationSet, cfg: SdsConfig) -> None:
    if calib.in_dim != model.in_dim:
        raise DataError(f"calibration has {calib.in_dim} features, model expects {model.in_dim}")
    for i, layer in enumerate(model.layers):
        check_pattern(layer.weight.shape, cfg.pattern, layer=i)
    if cfg.method is Method.SPARSEGPT:
        n_in = calib.n_tokens - int(np.floor(cfg.heldout_fraction * calib.n_tokens))
        widest = max(layer.in_dim for layer in model.layers)
        if n_in < widest:
            raise DataError(
                f"SparseGPT needs at least {widest} held-in calibration tokens, got {n_in}"
            )


def prune_model(model: LayerStack, x, cfg: SdsConfig, stage: str = "initial") -> LayerStack:
    """One-shot prune every layer, each on the model's own forward activations."""
    trace = forward_all(model, x)[:-1]
    weights = _per_layer(
        stage,
        model,
        lambda i, layer: prune_layer(cfg.method, layer.weight, trace[i], cfg.pattern, cfg.damp_fraction)[0],
    )
    return model.with_weights(weights)


def redense_model(dense: LayerStack, sparse: LayerStack, x, cfg: SdsConfig) -> LayerStack:
    working = sparse
    trace = collect_inputs(dense, sparse, x, cfg.data_mode)
    weights = []
    for i, layer in enumerate(dense.layers):
        try:
            w = redense(layer.weight, sparse.layers[i].weight, trace[i], cfg.recon)
        except SdsError as err:
            raise attach_context(err, layer=i, stage="redense")
        weights.append(w)
        if cfg.data_mode is DataMode.KD:
            working = working.with_weights(weights + working.weights[i + 1 :])
            trace.refresh_after(working, i)
        log.info("redense layer %d done", i)
    return sparse.with_weights(weights)


def adjust_model(dense: LayerStack, sparse2: LayerStack, x, cfg: SdsConfig) -> LayerStack:
    acfg = adjust_config(cfg.recon)
    working = sparse2
    trace = collect_inputs(dense, sparse2, x, cfg.data_mode)
    weights = []
    for i, layer in enumerate(dense.layers):
        try:
            w, _ = adjust_soft_mask(layer.weight, sparse2.layers[i].weight, trace[i], cfg.pattern, acfg)
        except SdsError as err:
            raise attach_context(err, layer=i, stage="final")
        weights.append(w)
        if cfg.data_mode is DataMode.KD:
            working = working.with_weights(weights + working.weights[i + 1 :])
            trace.refresh_after(working, i)
        log.info("adjust layer %d done", i)
    return sparse2.with_weights(weights)


def run_sds(model: LayerStack, calib: CalibrationSet, cfg: SdsConfig) -> tuple[LayerStack, PruneReport]:
    """Prune, regrow, and prune again; ``model`` itself is never modified.

    Step 1 prunes each layer on dense activations. Step 2 regrows each layer
    against the dense weights on the sparse model's activations (per the data
    mode). Step 3 prunes the regrown model with the same method and, unless
    that already beats step 1 on held-in data, adjusts it with a soft mask on
    the second-pruned model's activations.
    """
    validate(model, calib, cfg)
    dense = model
    x_in, x_out = calib.split(cfg.heldout_fraction)
    ev = _Evaluator(dense, x_in, x_out)
    report = PruneReport(config=cfg.to_dict())

    def record(stage: str, m: LayerStack) -> float:
        held_in, held_out = ev.layer_mse(m)
        for i, layer in enumerate(m.layers):
            report.layers.append(
                LayerRecord(i, stage, held_in[i], held_out[i], nnz_fraction(layer.weight))
            )
        total = sum(layer.weight.size for layer in m.layers)
        nnz = sum(int(np.count_nonzero(layer.weight)) for layer in m.layers) / total
        report.model.append(StageRecord(stage, held_in[-1], held_out[-1], nnz))
        return held_in[-1]

    t0 = time.perf_counter()
    sparse1 = prune_model(dense, _stage_inputs(calib, cfg, 0, x_in), cfg, "initial")
    err_initial = record("initial", sparse1)
    report.wall_times["initial"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    redensed = redense_model(dense, sparse1, _stage_inputs(calib, cfg, 1, x_in), cfg)
    record("redense", redensed)
    report.wall_times["redense"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    x3 = _stage_inputs(calib, cfg, 2, x_in)
    prune_src = dense if cfg.data_mode is DataMode.DD else redensed
    sparse2 = _prune_with_source(redensed, prune_src, x3, cfg)
    err_second = record("second_oneshot", sparse2)
    report.wall_times["second_oneshot"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    report.early_exit_taken = cfg.early_exit and early_exit_check(err_initial, err_second)
    if report.early_exit_taken:
        log.info("early exit: second one-shot prune %.4g <= initial %.4g", err_second, err_initial)
        final = sparse2
    else:
        final = adjust_model(dense, sparse2, x3, cfg)
    record("final", final)
    report.wall_times["final"] = time.perf_counter() - t0
    return final, report


def _prune_with_source(target: LayerStack, source: LayerStack, x, cfg: SdsConfig) -> LayerStack:
    if source is target:
        return prune_model(target, x, cfg, "second_oneshot")
    trace = forward_all(source, x)[:-1]
    weights = _per_layer(
        "second_oneshot",
        target,
        lambda i, layer: prune_layer(cfg.method, layer.weight, trace[i], cfg.pattern, cfg.damp_fraction)[0],
    )
    return target.with_weights(weights)


# ------------------------------------------------------------------ histograms


def weight_histogram(w, bins: int, range: tuple[float, float], exclude_zeros: bool = True) -> np.ndarray:
    """Bin counts over ``[lo, hi]``; values outside the range land in the end bins."""
    lo, hi = float(range[0]), float(range[1])
    if bins < 1:
        raise ConfigError("bins must be >= 1")
    if not lo < hi:
        raise ConfigError(f"histogram range needs lo < hi, got ({lo}, {hi})")
    v = np.asarray(w, dtype=F64).ravel()
    if exclude_zeros:
        v = v[v != 0]
    idx = np.floor((v - lo) / (hi - lo) * bins)
    idx = np.clip(idx, 0, bins - 1).astype(np.int64)
    return np.bincount(idx, minlength=bins)


def histogram_csv(counts: np.ndarray, range: tuple[float, float]) -> str:
    edges = np.linspace(range[0], range[1], len(counts) + 1)
    lines = ["bin_lo,bin_hi,count"]
    lines += [f"{edges[i]:.9g},{edges[i + 1]:.9g},{int(c)}" for i, c in enumerate(counts)]
    return "\n".join(lines) + "\n"
