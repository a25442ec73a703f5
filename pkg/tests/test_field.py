import math
import warnings

import numpy as np
import pytest
from scipy import stats

from nhgrem.chain import solve
from nhgrem.errors import GremError, GremWarning
from nhgrem.field import (compute_centering, energies, extremal_points, level_centering, max_energy,
                          replica_seed, sample_field, size_params, t1_satisfiable, thinning_filter,
                          thinning_masks, valid_sizes, window_count)
from nhgrem.model import builtin_model, subset


def setup(name, N):
    spec = builtin_model(name)
    chain, levels, crits = solve(spec)
    size = size_params(spec, N)
    return spec, chain, levels, crits, size


def test_size_params():
    spec = builtin_model("paradigmatic")
    size = size_params(spec, 12)
    assert size.bits == (4, 4, 4)
    real = sample_field(spec, size, 1)
    assert sorted(t.size for t in real.tables.values()) == [256, 256, 256]
    with pytest.raises(GremError) as e:
        size_params(spec, 10)
    assert e.value.code == "INVALID_N"
    assert "3.33333" in str(e.value)
    with pytest.raises(GremError) as e:
        size_params(builtin_model("REM"), 30)
    assert e.value.code == "SIZE_GUARD"
    assert valid_sizes(builtin_model("M5"), 20) == [5, 10, 15, 20]


def test_rem_table_variance():
    spec = builtin_model("REM")
    size = size_params(spec, 10)
    t = sample_field(spec, size, 3).tables[1]
    assert t.size == 1024
    se = 10.0 * math.sqrt(2.0 / (t.size - 1))
    assert abs(t.var(ddof=1) - 10.0) < 3 * se


def test_gaussian_transform_distribution():
    spec = builtin_model("REM")
    size = size_params(spec, 16)
    t = sample_field(spec, size, 11).tables[1].ravel() / 4.0
    assert stats.kstest(t, "norm").pvalue > 1e-3


def test_reproducible_and_thread_independent():
    spec, _, _, _, size = setup("paradigmatic", 12)
    a = sample_field(spec, size, 5)
    b = sample_field(spec, size, 5, workers=4)
    for J in spec.family:
        assert a.tables[J].tobytes() == b.tables[J].tobytes()
    c = sample_field(spec, size, 6)
    assert not np.array_equal(a.tables[3], c.tables[3])


def test_max_energy_fast_path():
    for name, N in (("REM", 14), ("M2", 10)):
        spec = builtin_model(name)
        size = size_params(spec, N)
        for seed in (0, 1, 2):
            assert max_energy(spec, size, seed) == sample_field(spec, size, seed).energy.max()


def test_energy_identities():
    spec, chain, levels, _, size = setup("M4", 12)
    real = sample_field(spec, size, 4)
    cen = compute_centering(spec, chain, levels, size)
    rng = np.random.default_rng(0)
    for _ in range(20):
        sigma = [int(rng.integers(d)) for d in size.dims]
        e = energies(real, chain, cen, sigma)
        assert abs(e.level.sum() - e.X) <= 1e-9
        assert abs(e.partial[-1] - (e.X - cen.a_N)) <= 1e-9 * size.N
        assert e.X == pytest.approx(real.energy[tuple(sigma)], abs=1e-12)


def test_energy_mean_zero():
    spec, _, _, _, size = setup("M2", 4)
    vals = np.array([sample_field(spec, size, replica_seed(9, r)).energy[1, 2] for r in range(4000)])
    assert abs(vals.mean()) < 3 * vals.std() / math.sqrt(vals.size)


def test_centering_rem_closed_form():
    spec, chain, levels, _, _ = setup("REM", 10)
    b = math.sqrt(2 * math.log(2))
    N = 100
    oracle = b * N - math.log(N) / (2 * b) - math.log(b * math.sqrt(2 * math.pi)) / b
    cen = compute_centering(spec, chain, levels, N)
    assert cen.a_N == pytest.approx(oracle, abs=1e-9)
    assert cen.a_N == pytest.approx(114.86618, abs=1e-5)


def test_centering_m4():
    spec, chain, levels, _, _ = setup("M4", 10)
    cen = compute_centering(spec, chain, levels, 200)
    assert levels.beta[0] * levels.delta[0] * 200 == pytest.approx(144.2026, abs=1e-4)
    assert cen.partial(chain.K, 5.0) == pytest.approx(cen.level.sum(), abs=1e-12)
    assert cen.a_N == pytest.approx(cen.level.sum())
    # a_{N,j} / (Delta_j N) approaches beta_j
    gaps = []
    for N in (10, 100, 1000, 10000):
        c = compute_centering(spec, chain, levels, N)
        gaps.append(abs(c.level[0] / (levels.delta[0] * N) - levels.beta[0]))
    assert all(b < a for a, b in zip(gaps, gaps[1:]))


def test_centering_mixed_form():
    spec, chain, levels, _, _ = setup("M4", 10)
    N, beta = 50, 1.3
    cen = compute_centering(spec, chain, levels, N, beta)
    assert cen.m == 1
    tail = beta * levels.delta[1] * N / 2 + levels.g[1] * N * math.log(2) / beta
    assert cen.a_N_m == pytest.approx(cen.level[0] + tail, abs=1e-12)


def test_level_centering_subset_value():
    spec, chain, levels, _, _ = setup("M2c", 10)
    cen = compute_centering(spec, chain, levels, 40)
    assert cen.subset_value(spec, 1, subset([1])) == pytest.approx(
        level_centering(float(levels.beta[0]), 0.5, 40), abs=1e-12)


def test_extremal_points_windows():
    spec, chain, levels, _, size = setup("REM", 10)
    real = sample_field(spec, size, 2)
    cen = compute_centering(spec, chain, levels, size)
    sig, val = extremal_points(real, cen, (1.0, 1.0))
    assert sig.shape == (0, 1) and val.size == 0
    sig, val = extremal_points(real, cen, (-1e9, math.inf))
    assert val.size == 1024
    assert np.all(np.diff(val) <= 0)
    assert np.allclose(val, np.sort(real.energy.ravel())[::-1] - cen.a_N)
    assert window_count(real, cen.a_N, 0.0) == int(np.sum(real.energy >= cen.a_N))


def test_t1_degenerate_m3():
    spec, chain, levels, crits, size = setup("M3", 8)
    assert not t1_satisfiable(crits.at(1))
    real = sample_field(spec, size, 0)
    with pytest.warns(GremWarning, match="DEGENERATE_T1"):
        t1, _ = thinning_filter(real, chain, levels, crits, 1, 0.1, 0.5, (0, 0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        m1, _ = thinning_masks(real, chain, levels, crits, 1, 0.1, 0.5)
    assert not np.any(m1[1] & m1[2])


def test_t1_fraction_m2c():
    # the difference statistic is Gaussian with sd 2 sqrt(N), so the pass rate is Phi(-eps1/2)
    spec, chain, levels, crits, size = setup("M2c", 8)
    frac = []
    for r in range(300):
        real = sample_field(spec, size, replica_seed(21, r))
        t1, _ = thinning_masks(real, chain, levels, crits, 1, 0.1, 0.5)
        frac.append(t1[1].mean())
    frac = np.array(frac)
    oracle = stats.norm.cdf(-0.05)
    assert abs(frac.mean() - oracle) < 3 * frac.std(ddof=1) / math.sqrt(frac.size)


def test_t2_large_eps_always_passes():
    spec, chain, levels, crits, size = setup("M2c", 16)
    for r in range(50):
        real = sample_field(spec, size, replica_seed(3, r))
        _, t2 = thinning_masks(real, chain, levels, crits, 1, 0.1, 10.0)
        assert all(m.all() for m in t2.values())


def test_thinning_filter_matches_masks():
    spec, chain, levels, crits, size = setup("M2c", 8)
    real = sample_field(spec, size, 8)
    t1m, t2m = thinning_masks(real, chain, levels, crits, 1, 0.2, 0.3)
    for sigma in [(0, 0), (3, 7), (15, 1)]:
        t1, t2 = thinning_filter(real, chain, levels, crits, 1, 0.2, 0.3, sigma)
        assert t1 == {A: bool(m[sigma]) for A, m in t1m.items()}
        assert t2 == {A: bool(m[sigma]) for A, m in t2m.items()}
    with pytest.raises(ValueError):
        thinning_filter(real, chain, levels, crits, 1, 0.0, 0.3, (0, 0))
