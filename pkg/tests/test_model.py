import itertools
import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nhgrem.chain import Chain, random_spec, solve
from nhgrem.errors import GremError, ValidationError
from nhgrem.model import (BUILTIN_NAMES, builtin_model, check_irreducibility, full_set, load_model_file,
                          members, model_from_dict, subset, subset_functionals, submasks, validate_model)


def brute_alpha(spec, A):
    return sum(v for J, v in spec.weights.items() if J & ~A == 0)


def test_subset_roundtrip():
    assert subset([1, 3]) == 0b101
    assert members(0b101) == [1, 3]
    assert subset([]) == 0
    assert full_set(4) == 0b1111


def test_submasks_strict():
    assert sorted(submasks(0b101)) == [0b001, 0b100]
    assert sorted(submasks(0b11, include_empty=True, include_full=True)) == [0, 1, 2, 3]


def test_paradigmatic_valid():
    spec = validate_model(3, [1 / 3] * 3, {(1, 2): 1 / 3, (1, 3): 1 / 3, (2, 3): 1 / 3})
    assert spec.alpha(spec.full) == 1.0
    assert spec.gamma_of(spec.full) == 1.0


def test_rem_valid():
    spec = validate_model(1, [1], {(1,): 1})
    assert spec.family == (1,)


def test_uncovered_coordinate():
    with pytest.raises(ValidationError) as e:
        validate_model(2, [0.5, 0.5], {(1,): 1.0})
    assert "UNCOVERED_COORDINATE" in e.value.codes


def test_error_codes():
    with pytest.raises(ValidationError) as e:
        validate_model(2, [0.5, 0.5], {(1,): 0.5, (1, 2): 0.4})
    assert e.value.codes == ["NON_NORMALIZED"]
    with pytest.raises(ValidationError) as e:
        validate_model(2, [0.5, 0.5], [((), 0.1), ((1, 2), 0.9)])
    assert "EMPTY_SET_WEIGHT" in e.value.codes
    with pytest.raises(ValidationError) as e:
        validate_model(2, [0.5, 0.5], [((1, 2), 0.5), ((2, 1), 0.5)])
    assert "DUPLICATE_SET" in e.value.codes
    with pytest.raises(ValidationError) as e:
        validate_model(21, [1 / 21] * 21, {tuple(range(1, 22)): 1.0})
    assert e.value.codes == ["N_TOO_LARGE"]
    with pytest.raises(ValidationError) as e:
        validate_model(2, [0.5, 0.5], {(1, 3): 1.0})
    assert "BAD_VALUE" in e.value.codes


def test_renormalize_flag():
    spec = validate_model(2, [1, 1], {(1, 2): 2.0}, renormalize=True)
    assert spec.renormalized
    assert spec.gamma == (0.5, 0.5)
    tiny = validate_model(2, [0.5, 0.5 + 1e-12], {(1, 2): 1.0})
    assert not tiny.renormalized
    assert tiny.alpha(tiny.full) == 1.0


def test_subset_functionals_paradigmatic():
    spec = builtin_model("paradigmatic")
    a, g, P = subset_functionals(spec, subset([1, 2]))
    assert a == pytest.approx(1 / 3, abs=1e-15)
    assert g == pytest.approx(2 / 3, abs=1e-15)
    assert P == [subset([1, 2])]
    assert subset_functionals(spec, 0) == (0.0, 0.0, [])
    a, g, _ = subset_functionals(spec, spec.full)
    assert (a, g) == (1.0, 1.0)


def test_exact_mode_keeps_rationals():
    spec = builtin_model("M2c")
    assert spec.alpha_exact(subset([1])) == Fraction(1, 2)
    assert spec.gamma_exact(spec.full) == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=10 ** 6))
def test_alpha_table_matches_brute_force(n, seed):
    spec = random_spec(np.random.default_rng(seed), n)
    for A in range(1 << n):
        assert spec.alpha(A) == pytest.approx(brute_alpha(spec, A), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=10 ** 6))
def test_monotone_functionals(n, seed):
    spec = random_spec(np.random.default_rng(seed), n)
    assert spec.alpha(spec.full) == 1.0 and spec.gamma_of(spec.full) == 1.0
    for A in range(1 << n):
        for B in submasks(A, include_empty=True):
            assert spec.alpha(B) <= spec.alpha(A) + 1e-15
            assert spec.gamma_of(B) <= spec.gamma_of(A) + 1e-15


def test_model_file_roundtrip(tmp_path):
    spec = builtin_model("M4")
    p = tmp_path / "m4.json"
    p.write_text(json.dumps(spec.to_dict()))
    back = load_model_file(p)
    assert back.weights == pytest.approx(spec.weights)
    assert back.gamma == spec.gamma


def test_model_file_parse_error(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"n": 2,\n "gamma": [0.5, 0.5,]}')
    with pytest.raises(GremError) as e:
        load_model_file(p)
    assert e.value.code == "PARSE_ERROR"
    assert "line 2" in str(e.value)
    with pytest.raises(GremError) as e:
        model_from_dict({"n": 1, "gamma": [1]})
    assert e.value.code == "PARSE_ERROR"


def test_unknown_builtin():
    with pytest.raises(GremError) as e:
        builtin_model("M9")
    assert e.value.code == "UNKNOWN_MODEL"


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_builtins_reproduce_expected_chain(name):
    spec = builtin_model(name)
    chain, _, crits = solve(spec)
    assert list(chain.sets) == spec.notes["expected_chain"]
    expected = spec.notes["expected_criticals"]
    for j in range(1, chain.K + 1):
        assert sorted(c.subset for c in crits.at(j)) == sorted(expected.get(j, []))


def test_builtin_parameters():
    m1 = builtin_model("M1")
    assert m1.weights == {subset([1]): 0.25, subset([1, 2]): 0.75}
    m4 = builtin_model("M4")
    assert m4.weights == {subset([1]): 0.75, subset([1, 2]): 0.25}
    m3 = builtin_model("M3")
    assert m3.weights == {subset([1]): 0.5, subset([2]): 0.5}


def test_irreducibility_m3():
    spec = builtin_model("M3")
    chain, _, _ = solve(spec)
    rep = check_irreducibility(spec, chain)
    assert rep.condition_c is False and rep.condition_c_prime is True
    assert any(w["level"] == 1 and w["subset"] == subset([1]) for w in rep.witnesses)


def test_irreducibility_m2c_and_m5():
    spec = builtin_model("M2c")
    rep = check_irreducibility(spec, solve(spec)[0])
    assert rep.condition_c and rep.condition_c_prime and not rep.witnesses
    spec = builtin_model("M5")
    rep = check_irreducibility(spec, solve(spec)[0])
    assert rep.condition_c and not rep.condition_c_prime
    assert any(w.get("level") == 2 for w in rep.witnesses)


def test_irreducibility_chain_mismatch():
    spec = builtin_model("M4")
    with pytest.raises(GremError) as e:
        check_irreducibility(spec, [1, 3])
    assert e.value.code == "CHAIN_MISMATCH"


def _permute(spec, perm):
    """Relabel coordinate i as perm[i-1]."""
    def pm(mask):
        return subset(perm[i - 1] for i in members(mask))
    gamma = [0.0] * spec.n
    for i, g in enumerate(spec.gamma, 1):
        gamma[perm[i - 1] - 1] = g
    return validate_model(spec.n, gamma, {pm(J): v for J, v in spec.weights.items()}), pm


@pytest.mark.parametrize("name", ["M2c", "M3", "M4", "M5", "paradigmatic"])
def test_irreducibility_relabeling_invariant(name):
    spec = builtin_model(name)
    chain, _, _ = solve(spec)
    base = check_irreducibility(spec, chain)
    for perm in itertools.permutations(range(1, spec.n + 1)):
        other, pm = _permute(spec, perm)
        rep = check_irreducibility(other, Chain(tuple(pm(A) for A in chain.sets)))
        assert (rep.condition_c, rep.condition_c_prime) == (base.condition_c, base.condition_c_prime)
        assert len(rep.witnesses) == len(base.witnesses)
