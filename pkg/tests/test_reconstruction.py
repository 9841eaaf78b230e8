import numpy as np
import pytest
from hypothesis import given, strategies as st

from sds.errors import ConfigError, DivergenceError
from sds.linalg import F32, Rng, gaussian
from sds.pruning import NM, Unstructured, mask_conforms, prune_magnitude, select_mask
from sds.reconstruction import (
    ReconConfig,
    adjust_soft_mask,
    data_term,
    early_exit_check,
    redense,
    redense_objective,
    reg_term,
    soft_mask_objective,
)

from conftest import rel_fro

F64 = np.float64


def central_diff(f, w, h=1e-3):
    g = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        e = np.zeros_like(w)
        e[idx] = h
        g[idx] = (f(w + e) - f(w - e)) / (2 * h)
    return g


def lipschitz(x, d_out, lambda2=0.0):
    x = np.asarray(x, F64)
    numel = d_out * x.shape[0]
    return 2 * np.linalg.eigvalsh(x @ x.T).max() / (x.shape[1] * d_out) + 2 * lambda2 / numel


def test_config_validation():
    with pytest.raises(ConfigError):
        ReconConfig(epochs=0)
    with pytest.raises(ConfigError):
        ReconConfig(lr=0)
    with pytest.raises(ConfigError):
        ReconConfig(lambda1=-1)
    cfg = ReconConfig()
    assert (cfg.epochs, cfg.lr, cfg.lambda1, cfg.lambda2, cfg.use_weight_reg) == (200, 0.1, 0.1, 0.1, True)
    assert cfg.to_dict()["optimizer"] == "adam"


@pytest.mark.parametrize("seed", range(5))
def test_redense_recovers_dense_without_regularization(seed, corr_inputs, rand_weight):
    w = rand_weight(seed, 16, 16, std=0.25)
    x = corr_inputs(seed, in_dim=16, n_tokens=64)
    sparse, _ = prune_magnitude(w, NM(2, 4))
    out = redense(w, sparse, x, ReconConfig(lambda1=0, lambda2=0))
    assert rel_fro(out, w) < 1e-2
    assert np.count_nonzero(out) > np.count_nonzero(sparse)


def test_redense_fixed_point(corr_inputs, rand_weight):
    w = rand_weight(1, 6, 8)
    out = redense(w, w, corr_inputs(2), ReconConfig(lambda1=0, lambda2=0))
    np.testing.assert_allclose(out, w, atol=1e-6)


def test_redense_matches_ridge_closed_form(corr_inputs, rand_weight):
    w_dense = rand_weight(3, 4, 4)
    x = corr_inputs(4, in_dim=4, n_tokens=32).astype(F64)
    lam2 = 0.5
    n, d_in = x.shape[1], x.shape[0]
    gram = x @ x.T
    # stationarity of mean data term + lam2 * mean(W^2): W (G + lam2 * n / d_in * I) = W_dense G
    ridge = w_dense.astype(F64) @ gram @ np.linalg.inv(gram + lam2 * n / d_in * np.eye(d_in))
    cfg = ReconConfig(lambda1=0, lambda2=lam2, optimizer="gd", lr=1 / lipschitz(x, 4, lam2), epochs=20_000)
    start, _ = prune_magnitude(w_dense, NM(2, 4))
    out = redense(w_dense, start, x, cfg)
    assert rel_fro(out, ridge) < 1e-3


@pytest.mark.parametrize("lambda1,lambda2,l2_form", [(0, 0, "squared"), (0, 0.3, "squared"), (0.5, 0.2, "squared"), (0.2, 0.2, "norm")])
def test_redense_gd_loss_non_increasing(lambda1, lambda2, l2_form, corr_inputs, rand_weight):
    for seed in range(5):
        w = rand_weight(seed, 8, 8)
        x = corr_inputs(seed + 50)
        sparse, _ = prune_magnitude(w, Unstructured(0.5))
        lr = 1 / lipschitz(x, 8, lambda2)
        if l2_form == "norm":
            lr *= 0.5
        hist = []
        redense(w, sparse, x, ReconConfig(lambda1=lambda1, lambda2=lambda2, l2_form=l2_form,
                                          optimizer="gd", lr=lr, epochs=300), history=hist)
        assert len(hist) == 301
        assert np.all(np.diff(hist) <= 1e-9 * max(hist[0], 1.0))


@pytest.mark.parametrize("seed", range(5))
def test_redense_large_l1_sparsifies(seed, corr_inputs, rand_weight):
    w = rand_weight(seed, 16, 16, std=0.25)
    x = corr_inputs(seed + 99, in_dim=16, n_tokens=64)
    x64 = x.astype(F64)
    _, g0 = data_term(np.zeros((16, 16)), w.astype(F64), x64 @ x64.T, x.shape[1])
    data_scale = w.size * float(np.mean(np.abs(g0)))
    sparse, _ = prune_magnitude(w, NM(2, 4))
    cfg = ReconConfig(lambda1=10 * data_scale, lambda2=0, optimizer="gd", lr=1 / lipschitz(x, 16), epochs=2000)
    out = redense(w, sparse, x, cfg)
    assert np.mean(np.abs(out) < 1e-3) >= 0.9


def test_redense_divergence_reports_step(corr_inputs, rand_weight):
    w = rand_weight(0, 4, 8)
    with pytest.raises(DivergenceError) as info:
        with np.errstate(all="ignore"):
            redense(w, np.zeros_like(w), corr_inputs(1) * 1e3, ReconConfig(optimizer="gd", lr=1e6, lambda1=0, lambda2=0, epochs=500))
    assert info.value.step is not None and info.value.step > 0


@given(st.integers(0, 2**32), st.sampled_from(["squared", "norm"]))
def test_regularized_objective_gradient(seed, l2_form):
    rng = Rng(seed)
    w_dense = gaussian(rng, 3, 4).astype(F64)
    w = gaussian(rng, 3, 4).astype(F64) + 0.1  # keep away from the L1 kink
    x = gaussian(rng, 4, 6).astype(F64)
    cfg = ReconConfig(lambda1=0.3, lambda2=0.2, l2_form=l2_form)
    loss, g = data_term(w, w_dense, x @ x.T, x.shape[1])
    rloss, rg = reg_term(w, cfg)
    assert loss + rloss == pytest.approx(redense_objective(w, w_dense, x, cfg), rel=1e-6)
    fd = central_diff(lambda v: redense_objective(v, w_dense, x, cfg), w, h=1e-5)
    np.testing.assert_allclose(g + rg, fd, rtol=1e-3, atol=1e-6)


# ------------------------------------------------------------------ soft mask


def constrained_optimum(w_dense, x, mask):
    """Per-row least squares restricted to the kept columns."""
    w_dense = np.asarray(w_dense, F64)
    x = np.asarray(x, F64)
    out = np.zeros_like(w_dense)
    for r in range(w_dense.shape[0]):
        cols = np.flatnonzero(mask[r])
        sol, *_ = np.linalg.lstsq(x[cols].T, x.T @ w_dense[r], rcond=None)
        out[r, cols] = sol
    return out


def test_soft_mask_stationary_point(corr_inputs, rand_weight):
    w_dense = rand_weight(4, 4, 8)
    x = corr_inputs(5)
    _, mask = prune_magnitude(w_dense, NM(2, 4))
    start = constrained_optimum(w_dense, x, mask).astype(F32)
    # only a stationary point of the soft mask if reselection keeps the same mask
    assert np.array_equal(select_mask(np.abs(start), NM(2, 4)), mask)
    out, out_mask = adjust_soft_mask(w_dense, start, x, NM(2, 4))
    np.testing.assert_array_equal(out_mask, mask)
    np.testing.assert_allclose(out, start, atol=1e-5)


@pytest.mark.parametrize("pattern", [NM(2, 4), NM(4, 8), Unstructured(0.5), Unstructured(0.7, "row")])
def test_soft_mask_every_iterate_conforms(pattern, corr_inputs, rand_weight):
    w_dense = rand_weight(6, 6, 8)
    start, _ = prune_magnitude(w_dense, pattern)
    seen = []
    out, mask = adjust_soft_mask(
        w_dense, start, corr_inputs(7), pattern, ReconConfig(use_weight_reg=False, epochs=50),
        on_step=lambda step, m: seen.append(mask_conforms(m, pattern)),
    )
    assert len(seen) == 51 and all(seen)
    assert mask_conforms(mask, pattern)
    assert np.all(out[~mask] == 0)


def test_soft_mask_improves_masked_error(corr_inputs, rand_weight):
    for seed in range(20):
        w_dense = rand_weight(seed, 8, 8)
        x = corr_inputs(seed + 300)
        start, start_mask = prune_magnitude(w_dense, NM(2, 4))
        hist = []
        out, mask = adjust_soft_mask(w_dense, start, x, NM(2, 4), history=hist)
        before = soft_mask_objective(start, w_dense, x, start_mask)[0]
        after = soft_mask_objective(out, w_dense, x, mask)[0]
        assert after <= before
        assert hist[0] == pytest.approx(before, rel=1e-6)
        assert hist[-1] == pytest.approx(after, rel=1e-5)


@pytest.mark.parametrize("seed", range(10))
def test_soft_mask_gradient_matches_finite_differences(seed):
    rng = Rng(seed)
    w_dense = gaussian(rng, 3, 4).astype(F64)
    w = gaussian(rng, 3, 4).astype(F64)
    x = gaussian(rng, 4, 6).astype(F64)
    mask = select_mask(np.abs(w), NM(2, 4))
    _, g = soft_mask_objective(w, w_dense, x, mask)
    fd = central_diff(lambda v: soft_mask_objective(v, w_dense, x, mask)[0], w, h=1e-3)
    np.testing.assert_allclose(g, fd, rtol=1e-3, atol=1e-9)
    assert np.all(g[~mask] == 0)


def test_routing_variants(corr_inputs, rand_weight):
    w_dense = rand_weight(8, 4, 8)
    x = corr_inputs(9)
    start, mask0 = prune_magnitude(w_dense, NM(2, 4))
    buffer = w_dense.copy()  # masked-out entries nonzero in the buffer
    masked, _ = adjust_soft_mask(w_dense, buffer, x, NM(2, 4), ReconConfig(use_weight_reg=False, epochs=1))
    st_out, _ = adjust_soft_mask(w_dense, buffer, x, NM(2, 4),
                                 ReconConfig(use_weight_reg=False, epochs=1, routing="straight-through"))
    assert not np.array_equal(masked, st_out)


def test_early_exit_check():
    assert early_exit_check(1.0, 0.9) is True
    assert early_exit_check(1.0, 1.0) is True
    assert early_exit_check(0.5, 0.9) is False
