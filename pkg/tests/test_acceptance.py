"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Run under pytest (lines appear in the terminal summary) or directly with
``python3 tests/test_acceptance.py``.
"""
import functools
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from sds.calibration import make_calibration
from sds.linalg import F32, F64, Rng, gaussian
from sds.model import decode_container, encode_container, random_model
from sds.pipeline import SdsConfig, run_sds, weight_histogram
from sds.pruning import (
    NM,
    Unstructured,
    accumulate_hessian,
    mask_conforms,
    prune_magnitude,
    prune_sparsegpt,
    prune_wanda,
    select_mask,
    weight_conforms,
)
from sds.reconstruction import ReconConfig, adjust_soft_mask, redense, soft_mask_objective
from sds.sparse import BENCH_SCHEMA, bench, spmm, to_csr

from test_pruning import constrained_lstsq, output_error

RESULTS: list[str] = []


def report(n: int, title: str, ok: bool, detail: str) -> None:
    RESULTS.append(f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {title} ({detail})")


def rel_fro(a, b) -> float:
    a, b = np.asarray(a, F64), np.asarray(b, F64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


# ---------------------------------------------------------------- criteria

def criterion_1():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        w = gaussian(Rng(seed), 8, 8)
        x = make_calibration(Rng(100 + seed), 8, 64, 0.5).x0
        hinv = accumulate_hessian(x, damp_fraction=0.0).inverse()
        row, col = (int(v) for v in Rng(seed).next_u64(2) % np.uint64(8))
        keep = np.ones((8, 8), bool)
        keep[row, col] = False
        out, _ = prune_sparsegpt(w, hinv, mask=keep)
        best = output_error(constrained_lstsq(w, x, row, col), w, x)
        worst = max(worst, abs(output_error(out, w, x) - best) / best)
    elapsed = time.perf_counter() - t0
    return worst <= 1e-4 and elapsed < 5, f"worst rel gap {worst:.2e}, {elapsed:.2f}s"


def criterion_2():
    t0 = time.perf_counter()
    dists = []
    cfg = ReconConfig(epochs=200, lambda1=0.0, lambda2=0.0)
    for seed in range(20):
        w = gaussian(Rng(seed), 16, 16, 0.0, 0.25)
        x = make_calibration(Rng(500 + seed), 16, 64, 0.5).x0
        assert np.linalg.matrix_rank(x.astype(F64)) == 16
        sparse, _ = prune_magnitude(w, NM(2, 4))
        dists.append(rel_fro(redense(w, sparse, x, cfg), w))
    elapsed = time.perf_counter() - t0
    ok = sum(d < 1e-2 for d in dists) == 20 and elapsed < 10
    return ok, f"{sum(d < 1e-2 for d in dists)}/20 under 1e-2, max {max(dists):.2e}, {elapsed:.2f}s"


@functools.lru_cache(maxsize=None)
def sds_trials(method: str) -> tuple[list[dict], float]:
    t0 = time.perf_counter()
    rows = []
    for seed in range(25):
        teacher = random_model(Rng(seed), [32, 64, 64, 32])
        calib = make_calibration(Rng(10_000 + seed), 32, 682, 0.5)
        _, rep = run_sds(teacher, calib, SdsConfig(method=method, pattern=NM(2, 4)))
        rows.append({s.stage: s.mse_vs_dense_heldout for s in rep.model})
    return rows, time.perf_counter() - t0


def criterion_3():
    parts, ok = [], True
    total = 0.0
    for method, need, need_median in (("sparsegpt", 20, 0.05), ("wanda", 18, None)):
        rows, elapsed = sds_trials(method)
        total += elapsed
        wins = sum(r["final"] < r["initial"] for r in rows)
        median = float(np.median([(r["initial"] - r["final"]) / r["initial"] for r in rows]))
        good = wins >= need and (need_median is None or median >= need_median)
        ok &= good
        parts.append(f"{method} {wins}/25 wins, median {median:.2%}")
    ok &= total < 180
    return ok, "; ".join(parts) + f"; {total:.1f}s"


def criterion_4():
    parts, ok = [], True
    for method in ("sparsegpt", "wanda"):
        rows, _ = sds_trials(method)
        wins = sum(r["redense"] < r["initial"] for r in rows)
        ok &= wins >= 23
        parts.append(f"{method} {wins}/25")
    return ok, ", ".join(parts)


def criterion_5():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    patterns = [Unstructured(0.3), Unstructured(0.5), Unstructured(0.7), NM(2, 4), NM(4, 8)]
    cases = bad = 0
    for i in range(520):
        pattern = patterns[i % len(patterns)]
        rows = int(rng.integers(1, 9))
        cols = 8 * int(rng.integers(1, 5))
        seed = int(rng.integers(0, 2**32))
        w = gaussian(Rng(seed), rows, cols)
        x = make_calibration(Rng(seed + 1), cols, cols + 16, float(rng.uniform(0, 0.9))).x0
        outs = [
            prune_magnitude(w, pattern),
            prune_wanda(w, x, pattern),
            prune_sparsegpt(w, accumulate_hessian(x).inverse(), pattern),
        ]
        for out, mask in outs:
            bad += not (mask_conforms(mask, pattern) and weight_conforms(out, pattern) and np.all(out[~mask] == 0))
        if i % 4 == 0:
            masks = []
            out, _ = adjust_soft_mask(w, outs[0][0], x, pattern, ReconConfig(epochs=10, use_weight_reg=False),
                                      on_step=lambda step, m: masks.append(m))
            bad += not all(mask_conforms(m, pattern) for m in masks)
            bad += not weight_conforms(out, pattern)
        cases += 1
    elapsed = time.perf_counter() - t0
    return bad == 0 and cases >= 500 and elapsed < 30, f"{cases} cases, {bad} violations, {elapsed:.2f}s"


def criterion_6():
    worst = 0.0
    h = 1e-3
    for seed in range(10):
        rng = Rng(seed)
        w_dense = gaussian(rng, 3, 4).astype(F64)
        w = gaussian(rng, 3, 4).astype(F64)
        x = gaussian(rng, 4, 6).astype(F64)
        mask = select_mask(np.abs(w), NM(2, 4))
        _, g = soft_mask_objective(w, w_dense, x, mask)
        fd = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            e = np.zeros_like(w)
            e[idx] = h
            fd[idx] = (soft_mask_objective(w + e, w_dense, x, mask)[0]
                       - soft_mask_objective(w - e, w_dense, x, mask)[0]) / (2 * h)
        worst = max(worst, rel_fro(g, fd))
    return worst <= 1e-3, f"worst rel error {worst:.2e}"


def criterion_7():
    identical = 0
    for seed in range(50):
        w = gaussian(Rng(seed), 8, 16)
        pattern = NM(2, 4) if seed % 2 else Unstructured(0.5)
        identical += np.array_equal(prune_wanda(w, np.ones(16), pattern)[1], prune_magnitude(w, pattern)[1])
    worst = 0.0
    for seed in range(10):
        w = gaussian(Rng(seed + 50), 8, 16)
        for pattern in (NM(2, 4), Unstructured(0.5)):
            out, _ = prune_sparsegpt(w, np.eye(16), pattern)
            worst = max(worst, float(np.max(np.abs(out - prune_magnitude(w, pattern)[0]))))
    return identical == 50 and worst <= 1e-6, f"{identical}/50 masks identical, H=I max diff {worst:.1e}"


def criterion_8():
    rng = np.random.default_rng(8)
    worst = 0.0
    for i in range(100):
        r, c, t = (int(v) for v in rng.integers(1, 257, size=3))
        w = gaussian(Rng(i), r, c)
        w[rng.random((r, c)) < rng.uniform(0, 1)] = 0
        x = gaussian(Rng(1000 + i), c, t)
        ref = w.astype(F64) @ x.astype(F64)
        worst = max(worst, rel_fro(spmm(to_csr(w), x), ref) if np.any(ref) else 0.0)
    dense = gaussian(Rng(7), 128, 128)
    sparse, _ = prune_magnitude(dense, NM(2, 4))
    rep = bench(sparse, sparse, gaussian(Rng(9), 128, 64), repeats=3)
    jsonschema.validate(rep.to_dict(), BENCH_SCHEMA)
    return worst <= 1e-5, f"worst rel error {worst:.1e}; bench schema-valid, speedup {rep.speedup:.2f} (informational)"


def criterion_9():
    def once():
        teacher = random_model(Rng(3), [16, 32, 16])
        calib = make_calibration(Rng(4), 16, 200, 0.5)
        cfg = SdsConfig(method="sparsegpt", pattern=NM(2, 4), early_exit=False, msd_seed_offsets=(1, 2, 3))
        final, rep = run_sds(teacher, calib, cfg)
        return rep.numerics(), [layer.weight.tobytes() for layer in final.layers]

    same_report = once() == once()
    rng = np.random.default_rng(9)
    exact = 0
    for i in range(100):
        entries = {}
        for j in range(int(rng.integers(0, 6))):
            shape = tuple(int(d) for d in rng.integers(0, 7, size=int(rng.integers(0, 4))))
            bits = rng.integers(0, 2**32, size=shape, dtype=np.uint32)
            entries[f"t{j}.{rng.integers(1e6)}"] = bits.view(F32)
        back = decode_container(encode_container(entries))
        exact += list(back) == list(entries) and all(
            back[k].shape == v.shape and back[k].tobytes() == v.tobytes() for k, v in entries.items()
        )
    return same_report and exact == 100, f"report reproducible: {same_report}; {exact}/100 containers bit-exact"


def criterion_10():
    w = random_model(Rng(11), [32, 64]).layers[0].weight
    x = make_calibration(Rng(12), 32, 256, 0.5).x0
    sparse, _ = prune_magnitude(w, NM(2, 4))
    lim = float(np.abs(w).max())
    rng_ = (-lim, lim)
    after_prune = int(weight_histogram(sparse, 50, rng_).sum())
    rd = redense(w, sparse, x, ReconConfig())
    after_redense = int(weight_histogram(rd, 50, rng_).sum())
    ok = after_prune == w.size // 2 and after_redense > after_prune
    return ok, f"numel {w.size}, after 2:4 {after_prune}, after re-dense {after_redense}"


CRITERIA = [
    (1, "SparseGPT single-weight compensation oracle", criterion_1),
    (2, "re-dense recovery", criterion_2),
    (3, "SDS improvement over one-shot pruning", criterion_3),
    (4, "re-dense beats initial sparse", criterion_4),
    (5, "mask validity", criterion_5),
    (6, "soft-mask gradient vs finite differences", criterion_6),
    (7, "Wanda/magnitude collapse and H=I SparseGPT", criterion_7),
    (8, "SpMM oracle and bench report", criterion_8),
    (9, "determinism and container round-trip", criterion_9),
    (10, "histogram sanity", criterion_10),
]


def check(n: int) -> None:
    _, title, fn = CRITERIA[n - 1]
    ok, detail = fn()
    report(n, title, ok, detail)
    assert ok, detail


def test_criterion_01():
    check(1)


def test_criterion_02():
    check(2)


def test_criterion_03():
    check(3)


def test_criterion_04():
    check(4)


def test_criterion_05():
    check(5)


def test_criterion_06():
    check(6)


def test_criterion_07():
    check(7)


def test_criterion_08():
    check(8)


def test_criterion_09():
    check(9)


def test_criterion_10():
    check(10)


if __name__ == "__main__":
    failed = 0
    for n, title, fn in CRITERIA:
        ok, detail = fn()
        report(n, title, ok, detail)
        print(RESULTS[-1], flush=True)
        failed += not ok
    sys.exit(1 if failed else 0)
