import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ifprune.softtopk import make_mask, soft_topk, soft_topk_backward, solve_tau

rows = st.integers(2, 16).flatmap(
    lambda d: st.tuples(arrays(np.float64, d, elements=st.floats(-6, 6)), st.integers(1, d)))


def budget(z, tau):
    return np.minimum(1.0, np.exp(z - tau)).sum()


def grid_scan_tau(z, t, n=200001):
    """Independent oracle: dense scan over tau for the budget crossing, then local refinement."""
    lo, hi = z.min() - np.log(len(z)) - 1, z.max() + np.log(len(z)) + 1
    for _ in range(4):
        grid = np.linspace(lo, hi, n)
        sums = np.minimum(1.0, np.exp(z[None] - grid[:, None])).sum(axis=1)
        i = np.flatnonzero(sums <= t)[0]
        lo, hi = grid[max(i - 1, 0)], grid[i]
    return 0.5 * (lo + hi)


def fd_grad(z, t, up, eps=1e-5):
    out = np.zeros_like(z)
    for j in range(len(z)):
        zp, zm = z.copy(), z.copy()
        zp[j] += eps
        zm[j] -= eps
        out[j] = (up @ soft_topk(zp, t)[1] - up @ soft_topk(zm, t)[1]) / (2 * eps)
    return out


def test_worked_example_matches_grid_scan():
    z = np.array([2.0, 1.0, 0.0, -1.0])
    tau = solve_tau(z, 2)
    assert abs(budget(z, tau) - 2) <= 1e-10
    assert tau == pytest.approx(grid_scan_tau(z, 2), abs=1e-9)
    lam, m, S, _ = soft_topk(z, 2)
    assert list(S) == [0, 1]
    assert np.flatnonzero(m).tolist() == [0, 1]


def test_equal_scores_full_budget_gives_all_ones():
    lam, m, S, tau = soft_topk(np.full(6, 0.7), 6)
    np.testing.assert_array_equal(m, np.ones(6))
    assert tau <= 0.7


def test_equal_scores_partial_budget_is_uniform():
    c, d, t = 1.3, 8, 3
    lam, m, S, tau = soft_topk(np.full(d, c), t)
    np.testing.assert_allclose(lam, t / d, rtol=1e-12)
    assert tau == pytest.approx(c - np.log(t / d), abs=1e-12)
    assert list(S) == [0, 1, 2]  # lowest-index tie break


def test_unique_max_selected_for_t1():
    z = np.array([0.1, -2.0, 3.0, 0.5])
    assert list(soft_topk(z, 1)[2]) == [2]


@pytest.mark.parametrize("t", [0, 5])
def test_invalid_budget_rejected(t):
    with pytest.raises(ValueError):
        solve_tau(np.zeros(4), t)


def test_backward_zero_upstream():
    z = np.random.default_rng(0).normal(size=8)
    np.testing.assert_array_equal(soft_topk_backward(z, 3, np.zeros(8)), 0)


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    z, up = rng.normal(size=8), rng.normal(size=8)
    analytic = soft_topk_backward(z, 3, up)
    numeric = fd_grad(z, 3, up)
    rel = np.abs(analytic - numeric) / np.maximum(np.maximum(abs(analytic), abs(numeric)), 1e-8)
    assert rel.max() <= 1e-5


def test_backward_symmetric_scores_sum_to_zero():
    d, t = 8, 3
    z = np.zeros(d)
    lam, m, S, _ = soft_topk(z, t)
    up = np.zeros(d)
    up[S] = 1.0
    dz = soft_topk_backward(z, t, up)
    assert abs(dz.sum()) < 1e-12
    # same conclusion from the finite-difference oracle
    assert abs(fd_grad(z + np.arange(d) * 1e-3, t, up).sum()) < 1e-6


def test_mask_record_invariants():
    z = np.random.default_rng(2).normal(size=(4, 32)) * 2
    mask = make_mask(z, 9)
    assert mask.selected.shape == (4, 9)
    np.testing.assert_allclose(mask.lam.sum(axis=1), 9, atol=1e-6)
    for layer in range(4):
        keep = np.zeros(32, bool)
        keep[mask.selected[layer]] = True
        np.testing.assert_array_equal(mask.m[layer][keep], mask.lam[layer][keep])
        assert np.all(mask.m[layer][~keep] == 0)
    assert np.all((mask.m >= 0) & (mask.m <= 1))


@settings(max_examples=200, deadline=None)
@given(rows)
def test_budget_and_cardinality(row):
    z, t = row
    lam, m, S, tau = soft_topk(z, t)
    assert abs(lam.sum() - t) <= 1e-6
    assert len(S) == t == len(set(S.tolist()))
    assert np.all((lam >= 0) & (lam <= 1))


@settings(max_examples=200, deadline=None)
@given(rows, st.floats(-50, 50))
def test_shift_invariance(row, c):
    z, t = row
    lam1, m1, S1, tau1 = soft_topk(z, t)
    lam2, m2, S2, tau2 = soft_topk(z + c, t)
    np.testing.assert_allclose(lam1, lam2, atol=1e-9)
    if t < len(z):
        assume(np.sort(lam1)[::-1][t - 1] - np.sort(lam1)[::-1][t] > 1e-9)
    np.testing.assert_array_equal(S1, S2)


@settings(max_examples=200, deadline=None)
@given(rows, st.data())
def test_raising_a_score_keeps_it_selected(row, data):
    z, t = row
    S = soft_topk(z, t)[2]
    j = data.draw(st.sampled_from(S.tolist()))
    z2 = z.copy()
    z2[j] += data.draw(st.floats(0, 10))
    assert j in soft_topk(z2, t)[2]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**20))
def test_backward_random_rows(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(3, 12))
    t = int(rng.integers(1, d))
    z, up = rng.normal(size=d) * 2, rng.normal(size=d)
    lam = soft_topk(z, t)[0]
    srt = np.sort(lam)[::-1]
    assume(srt[t - 1] - srt[t] > 1e-4)
    assume(np.all(np.abs(lam - 1) > 1e-4) or np.all(lam[lam > 1 - 1e-4] == 1))
    assume(np.all(np.abs(z - solve_tau(z, t)) > 1e-4))
    analytic = soft_topk_backward(z, t, up)
    numeric = fd_grad(z, t, up)
    rel = np.abs(analytic - numeric) / np.maximum(np.maximum(abs(analytic), abs(numeric)), 1e-8)
    assert rel.max() <= 1e-5
