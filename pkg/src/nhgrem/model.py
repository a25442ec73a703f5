"""Model definition for nonhierarchical GREMs.

A model on coordinates ``I = {1..n}`` is given by proportions ``gamma_i`` and
positive weights ``a_J`` on subsets ``J`` of ``I``. Subsets are encoded as
integer bitmasks: coordinate ``i`` (1-based) is bit ``i - 1``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Iterable, Mapping

import numpy as np

from .errors import GremError, ValidationError

MAX_N = 20
SUM_TOL = 1e-9


# -- subset helpers ---------------------------------------------------------

def subset(members: Iterable[int]) -> int:
    """Bitmask of a collection of 1-based coordinate indices."""
    m = 0
    for i in members:
        if i < 1:
            raise ValueError(f"coordinate index must be >= 1, got {i}")
        m |= 1 << (i - 1)
    return m


def members(mask: int) -> list[int]:
    """Sorted 1-based coordinates of a bitmask."""
    out = []
    i = 1
    while mask:
        if mask & 1:
            out.append(i)
        mask >>= 1
        i += 1
    return out


def full_set(n: int) -> int:
    return (1 << n) - 1


def fmt_set(mask: int) -> str:
    return "{" + ",".join(str(i) for i in members(mask)) + "}"


def submasks(mask: int, include_empty=False, include_full=False):
    """Yield the submasks of ``mask`` in decreasing numeric order."""
    sub = mask
    while sub:
        if sub != mask or include_full:
            yield sub
        sub = (sub - 1) & mask
    if include_empty:
        yield 0


def popcount(mask: int) -> int:
    return bin(mask).count("1")


# -- model ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ModelSpec:
    """A validated model. Build it with :func:`validate_model`.

    ``weights`` maps subset masks to ``a_J > 0``; ``exact_gamma`` and
    ``exact_weights`` hold rationals when the model was built in exact mode.
    """

    n: int
    gamma: tuple[float, ...]
    weights: Mapping[int, float]
    name: str = ""
    renormalized: bool = False
    exact_gamma: tuple[Fraction, ...] | None = None
    exact_weights: Mapping[int, Fraction] | None = None
    notes: dict = field(default_factory=dict)

    @property
    def full(self) -> int:
        return full_set(self.n)

    @property
    def exact(self) -> bool:
        return self.exact_weights is not None

    @cached_property
    def family(self) -> tuple[int, ...]:
        """The positive-weight subsets, sorted by mask."""
        return tuple(sorted(self.weights))

    @cached_property
    def alpha_table(self) -> np.ndarray:
        """``alpha(A)`` for every mask ``A`` (subset-sum transform)."""
        n = self.n
        arr = np.zeros(1 << n)
        for J, v in self.weights.items():
            arr[J] = v
        cube = arr.reshape((2,) * n)
        for ax in range(n):
            cube = np.cumsum(cube, axis=ax)
        arr = cube.reshape(-1)
        # normalization invariant pins alpha(I) = 1 exactly
        arr[-1] = 1.0
        arr.flags.writeable = False
        return arr

    @cached_property
    def gamma_table(self) -> np.ndarray:
        n = self.n
        masks = np.arange(1 << n)
        arr = np.zeros(1 << n)
        for i in range(n):
            arr += np.where(masks >> i & 1, self.gamma[i], 0.0)
        arr[-1] = 1.0
        arr.flags.writeable = False
        return arr

    def alpha(self, A: int) -> float:
        return float(self.alpha_table[A])

    def gamma_of(self, A: int) -> float:
        return float(self.gamma_table[A])

    def alpha_exact(self, A: int) -> Fraction:
        if not self.exact:
            raise GremError("NOT_EXACT", "model was not built in exact mode")
        if A == self.full:
            return Fraction(1)
        return sum((v for J, v in self.exact_weights.items() if J & ~A == 0), Fraction(0))

    def gamma_exact(self, A: int) -> Fraction:
        if not self.exact:
            raise GremError("NOT_EXACT", "model was not built in exact mode")
        return sum((self.exact_gamma[i - 1] for i in members(A)), Fraction(0))

    def family_within(self, A: int) -> list[int]:
        """``P_A``: positive-weight subsets contained in ``A``."""
        return [J for J in self.family if J & ~A == 0]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "gamma": list(self.gamma),
            "a": [{"set": members(J), "value": v} for J, v in sorted(self.weights.items())],
            "renormalize": self.renormalized,
        }

    def describe(self) -> str:
        ws = ", ".join(f"a{fmt_set(J)}={v:.6g}" for J, v in sorted(self.weights.items()))
        gs = ", ".join(f"{g:.6g}" for g in self.gamma)
        return f"{self.name or 'model'}: n={self.n}, gamma=({gs}), {ws}"


def _parse_number(v, exact):
    if isinstance(v, bool):
        raise TypeError("boolean is not a number")
    if exact:
        if isinstance(v, float):
            return Fraction(repr(v))
        return Fraction(v) if not isinstance(v, str) else Fraction(v.strip())
    if isinstance(v, Fraction):
        return float(v)
    return float(v)


def _as_mask(key, n):
    if isinstance(key, int):
        if key < 0 or key >> n:
            raise ValueError(f"mask {key} outside I")
        return key
    idx = list(key)
    if any((not isinstance(i, (int, np.integer))) or i < 1 or i > n for i in idx):
        raise ValueError(f"set {idx} not within 1..{n}")
    if len(set(idx)) != len(idx):
        raise ValueError(f"set {idx} repeats an index")
    return subset(int(i) for i in idx)


def validate_model(n, gamma, weights, renormalize=False, exact=False, name="") -> ModelSpec:
    """Check a raw model and return a :class:`ModelSpec`.

    ``weights`` maps sets (iterables of 1-based indices, or bitmasks) to
    values. Zero weights are dropped. Sums within ``1e-9`` of one are rescaled
    to exactly one; larger deviations are an error unless ``renormalize``.
    Values may be floats, decimal strings or :class:`~fractions.Fraction`;
    with ``exact=True`` they are kept as rationals too.

    Raises :class:`ValidationError` listing every problem found.
    """
    errors = []
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValidationError([("BAD_VALUE", f"n must be a positive integer, got {n!r}")])
    n = int(n)
    if n > MAX_N:
        raise ValidationError([("N_TOO_LARGE", f"n={n} exceeds the cap of {MAX_N} coordinates")])

    try:
        g = [_parse_number(v, exact) for v in gamma]
    except (TypeError, ValueError) as exc:
        raise ValidationError([("BAD_VALUE", f"gamma: {exc}")]) from None
    if len(g) != n:
        errors.append(("BAD_VALUE", f"gamma has {len(g)} entries, expected {n}"))
    for i, v in enumerate(g, 1):
        if not (v > 0) or (not exact and not math.isfinite(v)):
            errors.append(("BAD_VALUE", f"gamma_{i}={v} must be positive and finite"))

    w = {}
    items = weights.items() if isinstance(weights, Mapping) else weights
    for key, val in items:
        try:
            J = _as_mask(key, n)
            v = _parse_number(val, exact)
        except (TypeError, ValueError) as exc:
            errors.append(("BAD_VALUE", f"weight {key!r}: {exc}"))
            continue
        if J in w:
            errors.append(("DUPLICATE_SET", f"set {fmt_set(J)} given twice"))
            continue
        if (not exact and not math.isfinite(v)) or v < 0:
            errors.append(("BAD_VALUE", f"a{fmt_set(J)}={v} must be nonnegative and finite"))
            continue
        if J == 0:
            if v != 0:
                errors.append(("EMPTY_SET_WEIGHT", f"the empty set carries weight {v}"))
            continue
        if v > 0:
            w[J] = v
    if errors:
        raise ValidationError(errors)

    renormalized = False
    for label, values in (("gamma", g), ("a", w)):
        vals = list(values.values()) if isinstance(values, dict) else values
        total = sum(vals, Fraction(0)) if exact else math.fsum(vals)
        if total <= 0:
            errors.append(("NON_NORMALIZED", f"sum of {label} is {float(total)}"))
            continue
        off = abs(float(total) - 1.0)
        if off > SUM_TOL and not renormalize:
            errors.append(("NON_NORMALIZED", f"sum of {label} is {float(total):.12g}, off by {off:.3g}"))
            continue
        if total != 1:
            if off > SUM_TOL:
                renormalized = True
            if isinstance(values, dict):
                for J in values:
                    values[J] = values[J] / total
            else:
                values[:] = [v / total for v in values]

    covered = 0
    for J in w:
        covered |= J
    for i in range(1, n + 1):
        if not covered >> (i - 1) & 1:
            errors.append(("UNCOVERED_COORDINATE", f"coordinate {i} lies in no positive-weight set"))
    if errors:
        raise ValidationError(errors)

    if exact:
        return ModelSpec(
            n=n,
            gamma=tuple(float(v) for v in g),
            weights={J: float(v) for J, v in w.items()},
            name=name,
            renormalized=renormalized,
            exact_gamma=tuple(g),
            exact_weights=dict(w),
        )
    return ModelSpec(n=n, gamma=tuple(g), weights=w, name=name, renormalized=renormalized)


def subset_functionals(spec: ModelSpec, A: int):
    """Return ``(alpha(A), gamma(A), P_A)`` for a subset mask ``A``."""
    if A & ~spec.full:
        raise GremError("BAD_SUBSET", f"{fmt_set(A)} is not a subset of I")
    return spec.alpha(A), spec.gamma_of(A), spec.family_within(A)


# -- file format ------------------------------------------------------------

def model_from_dict(d: Mapping, exact=False, name="") -> ModelSpec:
    """Build a model from the JSON object layout used by model files."""
    try:
        n = d["n"]
        gamma = d["gamma"]
        raw = d["a"]
    except (KeyError, TypeError) as exc:
        raise GremError("PARSE_ERROR", f"model is missing field {exc}") from None
    pairs = []
    for k, entry in enumerate(raw):
        try:
            pairs.append((tuple(entry["set"]), entry["value"]))
        except (KeyError, TypeError):
            raise GremError("PARSE_ERROR", f"a[{k}] must be an object with 'set' and 'value'") from None
    return validate_model(n, gamma, pairs, renormalize=bool(d.get("renormalize", False)),
                          exact=exact or bool(d.get("exact", False)), name=name or d.get("name", ""))


def load_model_file(path, exact=False) -> ModelSpec:
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise GremError("PARSE_ERROR", f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from None
    return model_from_dict(d, exact=exact, name=str(path))


# -- irreducibility -------------------------------------------------------

@dataclass
class IrreducibilityReport:
    condition_c: bool
    condition_c_prime: bool
    witnesses: list = field(default_factory=list)

    @property
    def irreducible(self) -> bool:
        return self.condition_c and self.condition_c_prime

    def to_dict(self) -> dict:
        return {
            "condition_c": self.condition_c,
            "condition_c_prime": self.condition_c_prime,
            "witnesses": [
                {k: (members(v) if k == "subset" else v) for k, v in w.items()}
                for w in self.witnesses
            ],
        }


def _chain_sets(chain) -> list[int]:
    return list(getattr(chain, "sets", chain))


def check_irreducibility(spec: ModelSpec, chain) -> IrreducibilityReport:
    """Evaluate the two irreducibility conditions along a chain.

    Condition c is checked for the nonempty strict subsets ``A`` of each
    level increment that carry weight of their own (``alpha_hat > 0``); for
    subsets without weight no ``J'`` can exist and the quantifier is vacuous.
    """
    sets = _chain_sets(chain)
    if not sets or sets[0] != 0 or sets[-1] != spec.full:
        raise GremError("CHAIN_MISMATCH", "chain must run from the empty set to I")
    fam = np.array(spec.family, dtype=np.int64)
    witnesses = []
    cond_c = True
    for j in range(1, len(sets)):
        prev, cur = sets[j - 1], sets[j]
        inc = cur & ~prev
        in_cur = (fam & ~cur) == 0
        for A in submasks(inc):
            lower = A | prev
            in_lower = (fam & ~lower) == 0
            # J' in P_{A u A_{j-1}} \ P_{A_{j-1}}
            p2 = fam[in_lower & ((fam & ~prev) != 0)]
            if p2.size == 0:
                continue
            reach = int(np.bitwise_or.reduce(p2 & ~prev))
            # J in P_{A_j} \ P_{A u A_{j-1}}
            p1 = fam[in_cur & ~in_lower]
            if not np.any(p1 & reach):
                cond_c = False
                witnesses.append({"condition": "c", "level": j, "subset": A,
                                  "failed": "no J, J' with (J & J') outside A_{j-1}"})
    cond_cp = True
    for j in range(2, len(sets)):
        below = sets[j - 1] & ~sets[j - 2]
        cur, prev = sets[j], sets[j - 1]
        new = fam[((fam & ~cur) == 0) & ((fam & ~prev) != 0)]
        if not np.any(new & below):
            cond_cp = False
            witnesses.append({"condition": "c_prime", "level": j, "subset": None,
                              "failed": "no J in P_{A_j} \\ P_{A_{j-1}} meets A_{j-1} \\ A_{j-2}"})
    witnesses.sort(key=lambda w: (w["condition"] != "c", w["level"], w["subset"] or 0))
    return IrreducibilityReport(cond_c, cond_cp, witnesses)


# -- builtin models ---------------------------------------------------------

F = Fraction

# name -> (n, gamma, weights, expected chain as lists of 1-based sets, criticals per level, note)
_BUILTINS = {
    "REM": (1, [F(1)], {(1,): F(1)}, [[1]], {}, "single-coordinate random energy model"),
    "M1": (2, [F(1, 2), F(1, 2)], {(1,): F(1, 4), (1, 2): F(3, 4)}, [[1, 2]], {},
           "two-level GREM collapsing to one level; overlap {1} suppressed"),
    "M2": (2, [F(1, 2), F(1, 2)], {(1,): F(3, 10), (2,): F(3, 10), (1, 2): F(2, 5)}, [[1, 2]], {},
           "nonhierarchical, irreducible, one level, no critical subsets"),
    "M2c": (2, [F(1, 2), F(1, 2)], {(1,): F(1, 2), (2,): F(1, 5), (1, 2): F(3, 10)}, [[1, 2]],
            {1: [[1]]}, "M2 family with {1} critical at level 1"),
    "M3": (2, [F(1, 2), F(1, 2)], {(1,): F(1, 2), (2,): F(1, 2)}, [[1, 2]], {1: [[1], [2]]},
           "two independent REMs; reducible (fails condition c)"),
    "M4": (2, [F(1, 2), F(1, 2)], {(1,): F(3, 4), (1, 2): F(1, 4)}, [[1], [1, 2]], {},
           "two-level GREM with both levels frozen at low temperature"),
    "M5": (3, [F(1, 5), F(2, 5), F(2, 5)], {(1,): F(1, 2), (2,): F(1, 5), (2, 3): F(3, 10)},
           [[1], [1, 2, 3]], {}, "two levels; fails condition c' (no bond from level 2 to level 1)"),
    "paradigmatic": (3, [F(1, 3)] * 3, {(1, 2): F(1, 3), (1, 3): F(1, 3), (2, 3): F(1, 3)},
                     [[1, 2, 3]], {}, "three pair interactions on three coordinates"),
}

BUILTIN_NAMES = tuple(_BUILTINS)


def builtin_model(name: str) -> ModelSpec:
    """Return a builtin model; its expected chain is in ``spec.notes``."""
    if name not in _BUILTINS:
        raise GremError("UNKNOWN_MODEL", f"{name!r}; known: {', '.join(BUILTIN_NAMES)}")
    n, gamma, weights, chain, crit, note = _BUILTINS[name]
    spec = validate_model(n, gamma, weights, exact=True, name=name)
    spec.notes.update({
        "expected_chain": [0] + [subset(s) for s in chain],
        "expected_criticals": {j: [subset(s) for s in v] for j, v in crit.items()},
        "description": note,
    })
    return spec
