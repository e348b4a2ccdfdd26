import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize

from aisp.condbern import (
    TARGET_EPS,
    W_MAX,
    W_MIN,
    CBModel,
    SufficientStats,
    ce_update_cb,
    coverage_probs,
    draft_sample,
    draft_samples,
    ipf_fit,
    log_density_cb,
    norm_constants,
    smooth,
)
from aisp.errors import ContractViolation, NoEliteSamples

W5_PI = [0.16470588235294117, 0.3058823529411765, 0.4235294117647059,
         0.5176470588235295, 0.5882352941176471]


def enum_esp(w, r):
    return sum(math.prod(c) for c in itertools.combinations(w, r))


def enum_coverage(w, k):
    n = len(w)
    total = enum_esp(w, k)
    pi = np.zeros(n)
    for c in itertools.combinations(range(n), k):
        pi[list(c)] += math.prod(w[i] for i in c)
    return pi / total


def partitions(n, k):
    out = np.zeros((math.comb(n, k), n), dtype=np.int8)
    for row, c in zip(out, itertools.combinations(range(n), k)):
        row[list(c)] = 1
    return out


def test_small_constants_by_hand():
    table = norm_constants(CBModel([1, 2, 3], 2))
    np.testing.assert_allclose(table.R, [1, 6, 11], rtol=1e-14)
    cp = coverage_probs(CBModel([1, 2, 3], 2))
    np.testing.assert_allclose(cp.pi, [5 / 11, 8 / 11, 9 / 11], rtol=1e-14)
    np.testing.assert_allclose(cp.a, cp.pi / 2)


def test_log_density_by_hand():
    val = log_density_cb([0, 1, 1], CBModel([1, 2, 3], 2))
    assert val == pytest.approx(-0.6061358035703156, rel=1e-14)


def test_w5_constants():
    model = CBModel([1, 2, 3, 4, 5], 2)
    assert norm_constants(model).R[-1] == pytest.approx(85.0, rel=1e-14)
    np.testing.assert_allclose(coverage_probs(model).pi, W5_PI, rtol=1e-13)


def test_uniform_model_is_crude_permutation():
    model = CBModel.uniform(8, 3)
    dens = np.exp(log_density_cb(partitions(8, 3), model))
    np.testing.assert_allclose(dens, 1 / math.comb(8, 3), rtol=1e-13)
    np.testing.assert_allclose(coverage_probs(model).pi, 3 / 8, rtol=1e-13)


@pytest.mark.parametrize("method", ["stable", "alternating"])
@pytest.mark.parametrize("log_domain", [False, True])
def test_constants_match_enumeration(method, log_domain):
    rng = np.random.default_rng(10)
    for _ in range(20):
        n = int(rng.integers(1, 13))
        k = int(rng.integers(0, n + 1))
        w = rng.uniform(0.1, 10, n)
        table = norm_constants(CBModel(w, k), method=method, log_domain=log_domain)
        for r in range(k + 1):
            assert table.R[r] == pytest.approx(enum_esp(w, r), rel=1e-10)
        for j in range(n):
            rest = np.delete(w, j)
            for r in range(k):
                assert table.R_loo[j, r] == pytest.approx(enum_esp(rest, r), rel=1e-10)
        if method == "stable":
            break  # log_domain is ignored by the alternating route


def test_alternating_keeps_power_sums():
    w = np.array([0.5, 2.0, 3.0])
    table = norm_constants(CBModel(w, 2), method="alternating")
    np.testing.assert_allclose(table.T_pows[:2], [w.sum(), (w**2).sum()])


def test_unknown_recursion_rejected():
    with pytest.raises(ContractViolation):
        norm_constants(CBModel([1, 2], 1), method="magic")


def test_log_domain_handles_extreme_odds():
    rng = np.random.default_rng(2)
    w = np.exp(rng.uniform(-18, 18, 200))
    table = norm_constants(CBModel(w, 100))
    assert table.log_domain and np.isfinite(table.log_Rk)
    pi = coverage_probs(CBModel(w, 100), table).pi
    assert pi.sum() == pytest.approx(100, rel=1e-10)
    assert np.all((pi >= 0) & (pi <= 1 + 1e-12))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_law_is_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 10))
    k = int(rng.integers(1, n))
    w = rng.uniform(0.2, 5, n)
    a = coverage_probs(CBModel(w, k)).pi
    b = coverage_probs(CBModel(c * w, k)).pi
    np.testing.assert_allclose(a, b, rtol=1e-10)
    d = partitions(n, k)
    np.testing.assert_allclose(log_density_cb(d, CBModel(w, k)),
                               log_density_cb(d, CBModel(c * w, k)), rtol=1e-10, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_coverage_sums_to_k_and_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 10))
    k = int(rng.integers(0, n + 1))
    w = np.exp(rng.normal(0, 1.5, n))
    pi = coverage_probs(CBModel(w, k)).pi
    assert pi.sum() == pytest.approx(k, abs=1e-10)
    if k:
        np.testing.assert_allclose(pi, enum_coverage(w, k), rtol=1e-10)


def test_density_sums_to_one():
    rng = np.random.default_rng(3)
    for n, k in [(12, 6), (10, 3), (7, 1), (5, 5)]:
        model = CBModel(rng.uniform(0.1, 10, n), k)
        assert np.exp(log_density_cb(partitions(n, k), model)).sum() == pytest.approx(1, abs=1e-10)


def test_log_density_rejects_wrong_weight():
    with pytest.raises(ContractViolation):
        log_density_cb([1, 1, 1], CBModel([1, 2, 3], 2))


def test_model_invariants():
    with pytest.raises(ContractViolation):
        CBModel([1, -1], 1)
    with pytest.raises(ContractViolation):
        CBModel([1, 2], 3)
    np.testing.assert_array_equal(CBModel([1e-20, 1e20], 1).w, [W_MIN, W_MAX])


def test_draft_samples_shape_and_weight():
    rng = np.random.default_rng(0)
    model = CBModel(np.exp(rng.normal(size=15)), 6)
    d = draft_samples(model, rng, 500)
    assert d.shape == (500, 15) and np.all(d.sum(axis=1) == 6)
    assert set(np.unique(d)) <= {0, 1}
    one = draft_sample(model, rng)
    assert one.shape == (15,) and one.sum() == 6


def test_draft_samples_edge_sizes():
    rng = np.random.default_rng(0)
    assert np.all(draft_samples(CBModel([1, 2, 3], 0), rng, 4) == 0)
    assert np.all(draft_samples(CBModel([1, 2, 3], 3), rng, 4) == 1)


def test_drafting_frequencies_match_coverage():
    rng = np.random.default_rng(4)
    w = np.array([0.2, 0.5, 1.0, 3.0, 8.0, 1.5, 0.7])
    model = CBModel(w, 3)
    draws = 50_000
    freq = draft_samples(model, rng, draws).mean(axis=0)
    pi = coverage_probs(model).pi
    assert np.all(np.abs(freq - pi) <= 4 * np.sqrt(pi * (1 - pi) / draws))


def test_drafting_survives_extreme_odds():
    rng = np.random.default_rng(5)
    w = np.array([W_MIN] * 5 + [W_MAX] * 3 + [1.0] * 4)
    d = draft_samples(CBModel(w, 4), rng, 2000)
    assert np.all(d[:, 5:8] == 1)
    assert np.all(d[:, :5] == 0)


def _grid_search_optimum(t, k):
    """Maximize sum t_i theta_i - ln e_k(exp theta) with theta_n = 0 by grid refinement."""
    n = len(t)
    combos = list(itertools.combinations(range(n), k))

    def objective(theta):
        full = np.append(theta, 0.0)
        return float(t @ full) - math.log(sum(math.exp(full[list(c)].sum()) for c in combos))

    centre, width = np.zeros(n - 1), 4.0
    for _ in range(40):
        axes = [np.linspace(c - width, c + width, 9) for c in centre]
        best = max(itertools.product(*axes), key=lambda th: objective(np.array(th)))
        centre = np.array(best)
        width *= 0.5
    return np.exp(np.append(centre, 0.0))


def test_ipf_matches_grid_search_optimum():
    t = np.array([0.2, 0.45, 0.6, 0.75])
    w_grid = _grid_search_optimum(t, 2)
    fit = ipf_fit(SufficientStats(y=t * 10, S_sum=10.0, weights=np.ones(1)), 2)
    ratio = fit.w / fit.w[-1]
    np.testing.assert_allclose(ratio, w_grid, rtol=1e-6)
    np.testing.assert_allclose(coverage_probs(fit).pi, t, atol=1e-6)


def test_ipf_matches_generic_root_finder():
    t = np.array([0.1, 0.3, 0.5, 0.55, 0.7, 0.85])
    k = 3

    def resid(theta):
        return (enum_coverage(np.exp(np.append(theta, 0.0)), k) - t)[:-1]

    sol = optimize.root(resid, np.zeros(5), tol=1e-13)
    assert sol.success
    w_root = np.exp(np.append(sol.x, 0.0))
    fit = ipf_fit(SufficientStats(y=t, S_sum=1.0, weights=np.ones(1)), k)
    np.testing.assert_allclose(fit.w / fit.w[-1], w_root, rtol=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ipf_round_trip(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 31))
    k = int(rng.integers(1, n))
    w = np.exp(rng.normal(0, 1.0, n))
    pi = coverage_probs(CBModel(w, k)).pi
    s_sum = float(rng.uniform(0.5, 50))
    fit = ipf_fit(SufficientStats(y=pi * s_sum, S_sum=s_sum, weights=np.ones(1)), k)
    floored = np.clip(pi, TARGET_EPS, 1 - TARGET_EPS)
    np.testing.assert_allclose(coverage_probs(fit).pi, floored, atol=1e-6)


def test_ipf_degenerate_targets_are_floored():
    # one coordinate always included, one never
    y = np.array([5.0, 0.0, 2.0, 3.0])
    fit = ipf_fit(SufficientStats(y=y, S_sum=5.0, weights=np.ones(5)), 2)
    pi = coverage_probs(fit).pi
    assert pi[0] == pytest.approx(1 - TARGET_EPS, abs=1e-6)
    assert pi[1] == pytest.approx(TARGET_EPS, abs=1e-6)
    assert np.all(np.isfinite(fit.w))


def test_ipf_full_partition():
    fit = ipf_fit(SufficientStats(y=np.ones(3), S_sum=1.0, weights=np.ones(1)), 3)
    assert fit.k == 3


def test_ce_update_uses_weighted_inclusion_fractions():
    d = np.array([[1, 1, 0, 0], [1, 0, 1, 0], [0, 1, 0, 1], [0, 0, 1, 1]])
    elite = np.array([True, True, True, False])
    log_lr = np.log([2.0, 1.0, 1.0, 100.0])
    model = ce_update_cb(d, elite, log_lr, 2)
    np.testing.assert_allclose(coverage_probs(model).pi, [0.75, 0.75, 0.25, 0.25], atol=1e-6)
    # a common shift of the log weights changes nothing
    shifted = ce_update_cb(d, elite, log_lr + 40.0, 2)
    np.testing.assert_allclose(shifted.w, model.w, rtol=1e-12)


def test_ce_update_without_elites():
    with pytest.raises(NoEliteSamples):
        ce_update_cb([[1, 0]], [False], [0.0], 1)


def test_sufficient_stats_validation():
    with pytest.raises(ContractViolation):
        SufficientStats.from_partitions([[1, 0]], [1.0, 2.0])
    with pytest.raises(ContractViolation):
        SufficientStats.from_partitions([[1, 0]], [-1.0])


def test_smoothing_in_probability_space():
    old, new = CBModel([1.0, 1.0], 1), CBModel([3.0, 1 / 3], 1)
    assert smooth(new, old, 1.0) is new
    half = smooth(new, old, 0.5)
    np.testing.assert_allclose(half.w / (1 + half.w), [0.625, 0.375])
