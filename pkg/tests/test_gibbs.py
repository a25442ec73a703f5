import itertools
import math

import numpy as np
import pytest
from scipy import stats

from nhgrem.chain import Chain, solve
from nhgrem.errors import GremError
from nhgrem.field import compute_centering, replica_seed, sample_field, size_params
from nhgrem.gibbs import (GibbsTable, draw_configs, gibbs_table, is_nonultrametric_couple, layer_fluctuation,
                          marginal_gibbs, marginal_on, mark_masses, marked_pair_measure, overlap,
                          overlap_and_distance, triple_violations, ultrametric_stats)
from nhgrem.model import builtin_model, subset

LN2 = math.log(2.0)


def table_for(name, N, beta, seed=0, centered=True):
    spec = builtin_model(name)
    chain, levels, _ = solve(spec)
    size = size_params(spec, N)
    real = sample_field(spec, size, seed)
    cen = compute_centering(spec, chain, levels, size, beta) if centered else None
    return spec, chain, levels, size, real, gibbs_table(real, cen, beta)


def test_beta_zero_uniform():
    _, _, _, size, _, tab = table_for("M4", 10, 0.0)
    assert np.allclose(tab.flat, 2.0 ** -10, rtol=1e-12)
    assert tab.log_partition == pytest.approx(0.0, abs=1e-12)


def test_normalization_and_shift_invariance():
    spec, chain, levels, size, real, tab = table_for("M5", 15, 3.0)
    assert abs(tab.flat.sum() - 1.0) < 1e-12
    assert np.all(tab.flat > 0)
    raw = gibbs_table(real, None, 3.0)
    assert np.max(np.abs(raw.flat - tab.flat)) < 1e-12
    assert raw.log_partition == pytest.approx(tab.log_partition, abs=1e-12)


def test_log_partition_direct():
    spec, chain, levels, size, real, tab = table_for("M2", 8, 1.5)
    direct = math.log(np.mean(np.exp(1.5 * real.energy))) / 8
    assert tab.log_partition == pytest.approx(direct, abs=1e-12)


def _rem_mean_f(N, beta, replicas, seed=1):
    spec = builtin_model("REM")
    size = size_params(spec, N)
    return float(np.mean([gibbs_table(sample_field(spec, size, replica_seed(seed, r)), None, beta).log_partition
                          for r in range(replicas)]))


F2 = 2 * math.sqrt(2 * LN2) - LN2


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="the O(log N / N) centering correction is about 0.15 at N=20")
def test_rem_free_energy_finite_n():
    assert abs(_rem_mean_f(20, 2.0, 200) - F2) < 0.05


@pytest.mark.slow
def test_rem_free_energy_gap_shrinks():
    gaps = [F2 - _rem_mean_f(N, 2.0, 100) for N in (8, 14, 20)]
    assert gaps[0] > gaps[1] > gaps[2] > 0


def test_marginals():
    spec, chain, levels, size, real, tab = table_for("M4", 12, 4.0)
    full = marginal_gibbs(tab, chain, chain.K)
    assert np.array_equal(full.weights, tab.weights)
    m1 = marginal_gibbs(tab, chain, 1)
    assert m1.weights.shape == (size.dims[0],)
    assert m1.weights.sum() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(GremError):
        marginal_gibbs(tab, chain, 0)
    _, _, _, _, _, t0 = table_for("M4", 12, 0.0)
    assert np.allclose(marginal_gibbs(t0, chain, 1).weights, 1.0 / size.dims[0], rtol=1e-12)


def test_marginal_composition():
    spec, chain, levels, size, real, tab = table_for("M5", 10, 3.0)
    step = marginal_on(marginal_on(tab, subset([1, 2])), subset([1]))
    direct = marginal_on(tab, subset([1]))
    assert np.max(np.abs(step.weights - direct.weights)) <= 1e-15


def test_overlap_and_distance():
    assert overlap((1, 4, 2), (1, 7, 2)) == subset([1, 3])
    spec = builtin_model("paradigmatic")
    size = size_params(spec, 12)
    q, d = overlap_and_distance(spec, size, (0, 1, 2), (0, 3, 2))
    assert q == subset([1, 3]) and d == pytest.approx(4.0, abs=1e-12)
    q, d = overlap_and_distance(spec, size, (5, 5, 5), (5, 5, 5))
    assert q == 7 and d == 0.0


def test_distance_matches_field_variance():
    spec = builtin_model("M2")
    size = size_params(spec, 6)
    s, t = (1, 2), (1, 5)
    diff = np.array([(lambda e: e[s] - e[t])(sample_field(spec, size, replica_seed(4, r)).energy)
                     for r in range(4000)])
    _, d = overlap_and_distance(spec, size, s, t)
    m2 = np.mean(diff ** 2)
    se = np.std(diff ** 2) / math.sqrt(diff.size)
    assert abs(m2 - d * d) < 3 * se


def test_draw_configs_uniform_at_beta_zero():
    _, _, _, size, _, tab = table_for("M2", 8, 0.0)
    draws = draw_configs(tab, 10 ** 5, 3)
    for ax, d in enumerate(size.dims):
        freq = np.bincount(draws[:, ax], minlength=d) / draws.shape[0]
        se = math.sqrt((1 / d) * (1 - 1 / d) / draws.shape[0])
        assert np.all(np.abs(freq - 1 / d) < 4 * se)


def test_draw_configs_point_mass_and_chi_square():
    w = np.full((2, 4), 1e-14)
    w[1, 2] = 1.0 - w.sum() + 1e-14
    tab = GibbsTable(1.0, 3, w, (1, 2))
    assert np.all(draw_configs(tab, 1000, 0) == [1, 2])
    rng = np.random.default_rng(5)
    w = rng.random((2, 4))
    w /= w.sum()
    tab = GibbsTable(1.0, 3, w, (1, 2))
    d = draw_configs(tab, 20000, 9)
    counts = np.bincount(d[:, 0] * 4 + d[:, 1], minlength=8)
    assert stats.chisquare(counts, w.ravel() * 20000).pvalue > 0.01


def _direct_violation(spec, N, a, b, c):
    def dist(x, y):
        return 2 * N * (1 - spec.alpha(overlap(x, y)))
    d12, d23, d13 = dist(a, b), dist(b, c), dist(a, c)
    tol = 1e-9
    return (d13 > max(d12, d23) + tol or d12 > max(d13, d23) + tol or d23 > max(d12, d13) + tol)


def test_violation_rule_equals_distance_inequality_exhaustive():
    spec = builtin_model("paradigmatic")
    size = size_params(spec, 6)
    configs = np.array(list(itertools.product(*[range(d) for d in size.dims])))
    idx = np.array(list(itertools.product(range(len(configs)), repeat=3)))
    fast = triple_violations(spec, configs[idx[:, 0]], configs[idx[:, 1]], configs[idx[:, 2]])
    # the closed-form distances reduce to a comparison of alpha values; check on a subsample
    rng = np.random.default_rng(0)
    for k in rng.choice(len(idx), 3000, replace=False):
        a, b, c = (tuple(configs[i]) for i in idx[k])
        assert bool(fast[k]) == _direct_violation(spec, 6, a, b, c)


def test_chain_overlaps_never_violate():
    spec = builtin_model("M4")
    # overlaps {1} and {} and I: nested along the chain
    s1 = np.array([[0, 0], [0, 0], [0, 0]])
    s2 = np.array([[0, 1], [1, 1], [0, 0]])
    s3 = np.array([[1, 1], [0, 2], [0, 3]])
    assert not np.any(triple_violations(spec, s1, s2, s3))


def _exact_beta0_violation(spec, bits):
    """Violation probability for three uniform configurations, coordinate by coordinate."""
    pats = []
    for b in bits:
        M = 2.0 ** b
        # agreement patterns (12, 23, 13) with probabilities
        pats.append([((1, 1, 1), 1 / M ** 2), ((1, 0, 0), (1 / M) * (1 - 1 / M)),
                     ((0, 1, 0), (1 / M) * (1 - 1 / M)), ((0, 0, 1), (1 / M) * (1 - 1 / M)),
                     ((0, 0, 0), (1 - 1 / M) * (1 - 2 / M))])
    total = 0.0
    for combo in itertools.product(*pats):
        p = math.prod(c[1] for c in combo)
        qs = [sum(c[0][k] << i for i, c in enumerate(combo)) for k in range(3)]
        a = sorted(round(spec.alpha(q), 12) for q in qs)
        total += p * (a[0] != a[1])
    return total


def test_beta_zero_violation_fraction():
    spec = builtin_model("paradigmatic")
    for N in (6, 12):
        size = size_params(spec, N)
        tab = gibbs_table(sample_field(spec, size, 0), None, 0.0)
        rep = ultrametric_stats(tab, spec, 100_000, 7)
        exact = _exact_beta0_violation(spec, size.bits)
        assert abs(rep.fraction - exact) < 4 * math.sqrt(exact * (1 - exact) / rep.triples)
    # brute-force enumeration of all triples at N=6 agrees with the pattern formula
    size = size_params(spec, 6)
    configs = np.array(list(itertools.product(*[range(d) for d in size.dims])))
    idx = np.array(list(itertools.product(range(len(configs)), repeat=3)))
    brute = triple_violations(spec, configs[idx[:, 0]], configs[idx[:, 1]], configs[idx[:, 2]]).mean()
    assert brute == pytest.approx(_exact_beta0_violation(spec, size.bits), abs=1e-12)


def test_ultrametric_exchange_symmetry():
    spec, chain, levels, size, real, tab = table_for("paradigmatic", 9, 2.0)
    rep = ultrametric_stats(tab, spec, 5000, 1, keep_samples=True)
    s1, s2, s3 = rep.samples
    for perm in itertools.permutations((s1, s2, s3)):
        assert int(triple_violations(spec, *perm).sum()) == rep.violations


def test_nonultrametric_couple():
    assert is_nonultrametric_couple((1, 1), (1, 1), Chain((0, 3))) == (False, None)
    assert is_nonultrametric_couple((1, 1), (1, 2), Chain((0, 3))) == (True, (1, 1))
    assert is_nonultrametric_couple((1, 1), (1, 2), Chain((0, 1, 3)))[0] is False


def test_pair_measure_toy_and_expansion():
    tab = GibbsTable(1.0, 2, np.array([[0.7, 0.3]]), (1, 2))
    pm = marked_pair_measure(tab, 1.0)
    assert len(pm) == 1
    assert {pm.w1[0], pm.w2[0]} == {0.7, 0.3}
    assert pm.marks[0] == subset([1])
    spec, chain, levels, size, real, t = table_for("M2", 6, 1.0)
    pm = marked_pair_measure(t, 1.0)
    assert 2 * np.sum(pm.w1 * pm.w2) + pm.diagonal == pytest.approx(pm.coverage ** 2, abs=1e-9)
    sw = pm.swapped()
    assert np.array_equal(sw.w1, pm.w2) and np.array_equal(sw.marks, pm.marks)


def test_pair_measure_coverage():
    spec, chain, levels, size, real, t = table_for("REM", 14, 2 * math.sqrt(2 * LN2))
    pm = marked_pair_measure(t, 0.999)
    assert pm.coverage >= 0.999
    assert set(np.unique(pm.marks)) <= {0}
    assert sum(mark_masses(pm).values()) == pytest.approx(2 * np.sum(pm.w1 * pm.w2))


def test_layer_fluctuation_deterministic():
    spec = builtin_model("M4")
    chain, levels, _ = solve(spec)
    size = size_params(spec, 8)
    real = sample_field(spec, size, 0)
    for J in real.tables:
        real.tables[J] = np.zeros_like(real.tables[J])
    beta = 1.3
    lr = layer_fluctuation(real, chain, levels, 1, beta, (0,))
    assert lr == pytest.approx(-beta * beta * levels.delta[1] * 8 / 2, abs=1e-12)
    assert layer_fluctuation(real, chain, levels, 2, 3.0, (0, 0)) == 0.0
    with pytest.raises(GremError) as e:
        layer_fluctuation(real, chain, levels, 1, 2.0, (0,))
    assert e.value.code == "REGIME_MISMATCH"


def test_layer_fluctuation_matches_brute_force():
    from scipy.special import logsumexp
    spec = builtin_model("M4")
    chain, levels, _ = solve(spec)
    N, beta = 8, 1.3
    real = sample_field(spec, size_params(spec, N), 1)
    tail = real.level_energy(chain, 2)[3]
    ref = logsumexp(beta * tail) - (beta ** 2 * levels.delta[1] * N / 2 + levels.g[1] * N * LN2)
    assert layer_fluctuation(real, chain, levels, 1, beta, (3,)) == pytest.approx(ref, abs=1e-12)


def _layer_sample(beta, N, replicas=200, seed=77):
    spec = builtin_model("M4")
    chain, levels, _ = solve(spec)
    size = size_params(spec, N)
    return np.array([layer_fluctuation(sample_field(spec, size, replica_seed(seed, r)), chain, levels, 1,
                                       beta, (0,)) for r in range(replicas)])


def test_layer_fluctuation_concentrates_in_l2_regime():
    # below beta^2 Delta = G ln 2 for the tail level the log ratio concentrates
    v = [np.var(_layer_sample(1.0, N)) for N in (8, 12, 16)]
    assert v[0] > v[1] > v[2]


@pytest.mark.xfail(strict=True, reason="beta=1.3 is outside the L2 regime of the tail level; about 65% of replicas meet the bound at N=16")
def test_layer_fluctuation_spec_bound():
    v = _layer_sample(1.3, 16)
    assert np.mean(np.abs(v) < 16 ** -0.25) >= 0.95
