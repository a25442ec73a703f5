"""Optimal chain, phase temperatures, critical subsets and free energies."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GremError
from .model import ModelSpec, fmt_set, members, submasks

LN2 = math.log(2.0)
DEFAULT_TOL = 1e-9


@dataclass(frozen=True)
class Chain:
    """Strictly increasing subsets ``A_0 = {} < A_1 < ... < A_K = I`` (masks)."""

    sets: tuple[int, ...]

    def __post_init__(self):
        s = tuple(int(a) for a in self.sets)
        object.__setattr__(self, "sets", s)
        if len(s) < 2 or s[0] != 0:
            raise GremError("BAD_CHAIN", "a chain starts at the empty set and has at least one level")
        for lo, hi in zip(s, s[1:]):
            if lo & ~hi or lo == hi:
                raise GremError("BAD_CHAIN", f"{fmt_set(lo)} is not a strict subset of {fmt_set(hi)}")

    @property
    def K(self) -> int:
        return len(self.sets) - 1

    def increment(self, j: int) -> int:
        """``A_j \\ A_{j-1}``."""
        return self.sets[j] & ~self.sets[j - 1]

    def restrict(self, m: int) -> "Chain":
        return Chain(self.sets[: m + 1])

    def __str__(self):
        return "(" + ", ".join(fmt_set(a) if a else "{}" for a in self.sets) + ")"

    def to_list(self):
        return [members(a) for a in self.sets]


@dataclass
class LevelData:
    """Per-level increments along a chain; index ``j - 1`` holds level ``j``."""

    chain: Chain
    delta: np.ndarray
    g: np.ndarray
    beta: np.ndarray

    @property
    def K(self) -> int:
        return len(self.delta)

    def to_dict(self) -> dict:
        return {
            "chain": self.chain.to_list(),
            "delta": self.delta.tolist(),
            "G": self.g.tolist(),
            "beta": self.beta.tolist(),
        }


@dataclass
class CriticalSubset:
    level: int
    subset: int
    alpha_hat: float
    alpha_hat_c: float
    family: list[int]
    family_c: list[int]

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "subset": members(self.subset),
            "alpha_hat": self.alpha_hat,
            "alpha_hat_c": self.alpha_hat_c,
            "family": [members(J) for J in self.family],
            "family_c": [members(J) for J in self.family_c],
        }


@dataclass
class CriticalReport:
    levels: list[list[CriticalSubset]]

    def at(self, j: int) -> list[CriticalSubset]:
        return self.levels[j - 1]

    def has_criticals(self, j: int) -> bool:
        return bool(self.levels[j - 1])

    def to_dict(self) -> dict:
        return {"levels": [[c.to_dict() for c in lvl] for lvl in self.levels]}


@dataclass
class PhaseDiagram:
    beta: float
    m: int
    x: np.ndarray
    t: np.ndarray = field(default_factory=lambda: np.zeros(0))


# -- rho ----------------------------------------------------------------------

def _ratio(spec: ModelSpec, B: int, A: int):
    """``(gamma(A) - gamma(B)) / (alpha(A) - alpha(B))``, exact when possible."""
    if spec.exact:
        da = spec.alpha_exact(A) - spec.alpha_exact(B)
        dg = spec.gamma_exact(A) - spec.gamma_exact(B)
    else:
        da = spec.alpha(A) - spec.alpha(B)
        dg = spec.gamma_of(A) - spec.gamma_of(B)
    if da <= 0:
        return math.inf
    return dg / da


def _beta_of_ratio(r) -> float:
    return math.inf if r == math.inf else math.sqrt(2.0 * LN2 * float(r))


def rho(spec: ModelSpec, B: int, A: int) -> float:
    """``sqrt(2 ln2 (gamma(A)-gamma(B)) / (alpha(A)-alpha(B)))``; ``inf`` on flat alpha."""
    if B & ~A or B == A:
        raise GremError("BAD_PAIR", f"{fmt_set(B)} must be a strict subset of {fmt_set(A)}")
    return _beta_of_ratio(_ratio(spec, B, A))


def _supersets(cur: int, full: int) -> np.ndarray:
    """All masks strictly containing ``cur`` within ``full``."""
    free = [b for b in range(full.bit_length()) if (full & ~cur) >> b & 1]
    idx = np.arange(1, 1 << len(free), dtype=np.int64)
    out = np.full(idx.shape, cur, dtype=np.int64)
    for t, b in enumerate(free):
        out |= ((idx >> t) & 1) << b
    return out


def _level_step(spec: ModelSpec, cur: int, tol: float):
    """Minimal ratio from ``cur`` and the union of its minimizers."""
    cands = _supersets(cur, spec.full)
    if spec.exact:
        best = None
        union = 0
        for A in cands.tolist():
            r = _ratio(spec, cur, A)
            if r == math.inf:
                continue
            if best is None or r < best:
                best, union = r, A
            elif r == best:
                union |= A
        if best is None:
            raise GremError("NO_FINITE_RHO", f"no finite rho above {fmt_set(cur)}")
        return _beta_of_ratio(best), union, _ratio(spec, cur, union) == best
    at, gt = spec.alpha_table, spec.gamma_table
    da = at[cands] - at[cur]
    dg = gt[cands] - gt[cur]
    with np.errstate(divide="ignore", invalid="ignore"):
        beta = np.where(da > 0, np.sqrt(2.0 * LN2 * dg / np.where(da > 0, da, 1.0)), np.inf)
    bmin = float(beta.min())
    if not math.isfinite(bmin):
        raise GremError("NO_FINITE_RHO", f"no finite rho above {fmt_set(cur)}")
    union = int(np.bitwise_or.reduce(cands[beta <= bmin * (1.0 + tol)]))
    ok = abs(rho(spec, cur, union) - bmin) <= tol * bmin
    return bmin, union, ok


def build_chain(spec: ModelSpec, tol: float = DEFAULT_TOL) -> tuple[Chain, LevelData]:
    """Run the minimal-rho recursion from the empty set up to ``I``.

    Each level takes the union of all minimizers (within relative ``tol``, or
    exactly for rational models) and checks that the union is itself a
    minimizer and that the temperatures increase.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    sets = [0]
    betas = []
    cur = 0
    while cur != spec.full:
        b, nxt, ok = _level_step(spec, cur, tol)
        if not ok:
            raise GremError("NONMONOTONE_BETA",
                            f"union of minimizers above {fmt_set(cur)} is not a minimizer (tolerance pathology)")
        if betas and not b > betas[-1]:
            raise GremError("NONMONOTONE_BETA", f"beta_{len(betas) + 1}={b!r} <= beta_{len(betas)}={betas[-1]!r}")
        betas.append(b)
        sets.append(nxt)
        cur = nxt
    chain = Chain(tuple(sets))
    levels = coarse_grain(spec, chain)
    levels.beta = np.array(betas)
    return chain, levels


def coarse_grain(spec: ModelSpec, chain) -> LevelData:
    """Level weights ``alpha(A_j) - alpha(A_{j-1})`` and ``G_j`` of a chain.

    ``beta`` holds the raw per-level ``rho(A_{j-1}, A_j)``, which need not be
    increasing for an arbitrary chain.
    """
    if not isinstance(chain, Chain):
        chain = Chain(tuple(chain))
    if chain.sets[-1] != spec.full:
        raise GremError("CHAIN_MISMATCH", "chain must end at I")
    s = chain.sets
    delta = np.array([spec.alpha(s[j]) - spec.alpha(s[j - 1]) for j in range(1, len(s))])
    g = np.array([spec.gamma_of(s[j]) - spec.gamma_of(s[j - 1]) for j in range(1, len(s))])
    for j, d in enumerate(delta, 1):
        if not d > 0:
            raise GremError("ZERO_LEVEL_WEIGHT", f"level {j} of {chain} carries no weight")
    beta = np.sqrt(2.0 * LN2 * g / delta)
    return LevelData(chain, delta, g, beta)


def find_critical_subsets(spec: ModelSpec, chain: Chain, levels: LevelData,
                          tol: float = DEFAULT_TOL) -> CriticalReport:
    out = []
    for j in range(1, chain.K + 1):
        prev, cur = chain.sets[j - 1], chain.sets[j]
        bj = float(levels.beta[j - 1])
        target = None
        if spec.exact:
            target = _ratio(spec, prev, cur)
        new_family = [J for J in spec.family if J & ~cur == 0 and J & ~prev != 0]
        found = []
        for A in sorted(submasks(chain.increment(j))):
            lower = A | prev
            a_hat = spec.alpha(lower) - spec.alpha(prev)
            if not a_hat > 0:
                continue
            if spec.exact:
                critical = _ratio(spec, prev, lower) == target
            else:
                critical = abs(rho(spec, prev, lower) - bj) <= tol * bj
            if not critical:
                continue
            fam = [J for J in new_family if J & ~lower == 0]
            fam_c = [J for J in new_family if J & ~lower != 0]
            found.append(CriticalSubset(j, A, a_hat, float(levels.delta[j - 1]) - a_hat, fam, fam_c))
        out.append(found)
    return CriticalReport(out)


def solve(spec: ModelSpec, tol: float = DEFAULT_TOL):
    """Chain, level data and critical report in one call."""
    chain, levels = build_chain(spec, tol)
    return chain, levels, find_critical_subsets(spec, chain, levels, tol)


# -- free energy --------------------------------------------------------------

def concave_levels(alphas, gammas):
    """Merge the levels of a chain with cumulative ``alphas``/``gammas``.

    Restricted minimal-ratio recursion over the chain's own sets; returns
    ``(delta, G, beta_hat)`` with ``beta_hat`` increasing. Flat-alpha steps
    are absorbed into the following level.
    """
    alphas = [float(a) for a in alphas]
    gammas = [float(g) for g in gammas]
    K = len(alphas) - 1
    i = 0
    deltas, gs, bs = [], [], []
    while i < K:
        ratios = []
        for k in range(i + 1, K + 1):
            da = alphas[k] - alphas[i]
            ratios.append((gammas[k] - gammas[i]) / da if da > 0 else math.inf)
        best = min(ratios)
        if best == math.inf:
            raise GremError("NO_FINITE_RHO", "chain ends on an alpha-flat step")
        best_k = i + 1 + max(t for t, r in enumerate(ratios) if r <= best * (1.0 + 1e-12))
        deltas.append(alphas[best_k] - alphas[i])
        gs.append(gammas[best_k] - gammas[i])
        bs.append(math.sqrt(2.0 * LN2 * best))
        i = best_k
    return np.array(deltas), np.array(gs), np.array(bs)


def grem_free_energy(delta, g, beta_hat, beta):
    """Free energy of a GREM with increasing level temperatures ``beta_hat``."""
    b = np.asarray(beta, dtype=float)
    total = np.zeros_like(b)
    for d, gg, bh in zip(delta, g, beta_hat):
        total = total + np.where(b <= bh, 0.5 * b * b * d, b * bh * d - gg * LN2)
    return total if total.ndim else float(total)


def free_energy_chain(spec: ModelSpec, chain, beta):
    """``f(beta, S)`` for any chain ``S`` of ``spec`` (vectorized in ``beta``)."""
    sets = getattr(chain, "sets", chain)
    alphas = [spec.alpha(a) for a in sets]
    gammas = [spec.gamma_of(a) for a in sets]
    return grem_free_energy(*concave_levels(alphas, gammas), beta)


def free_energy(levels: LevelData, beta):
    """Free energy from solver levels (already increasing in ``beta``)."""
    return grem_free_energy(levels.delta, levels.g, levels.beta, beta)


def ordered_partitions(mask: int):
    """Yield every chain of ``mask`` as a tuple of cumulative masks."""
    def rec(prefix, rest):
        if rest == 0:
            yield prefix
            return
        base = prefix[-1]
        for block in sorted(submasks(rest, include_full=True)):
            yield from rec(prefix + (base | block,), rest & ~block)
    yield from rec((0,), mask)


MAX_EXHAUSTIVE_N = 8


def exhaustive_min_chain(spec: ModelSpec, beta_grid):
    """Minimum of ``f(beta, S)`` over every chain ``S``.

    Returns ``(chain, minima)``: a chain attaining the minimum at every grid
    point within 1e-12 (``None`` if no single chain does) and the pointwise
    minima. Ties go to the chain with fewest levels, then lexicographically.
    """
    if spec.n > MAX_EXHAUSTIVE_N:
        raise GremError("TOO_MANY_CHAINS", f"n={spec.n} > {MAX_EXHAUSTIVE_N}")
    grid = np.asarray(beta_grid, dtype=float)
    at, gt = spec.alpha_table, spec.gamma_table
    chains = list(ordered_partitions(spec.full))
    values = np.empty((len(chains), grid.size))
    for k, sets in enumerate(chains):
        values[k] = grem_free_energy(*concave_levels(at[list(sets)], gt[list(sets)]), grid)
    minima = values.min(axis=0)
    best = None
    for k in sorted(range(len(chains)), key=lambda k: (len(chains[k]), chains[k])):
        if np.all(values[k] - minima <= 1e-12):
            best = Chain(chains[k])
            break
    return best, minima


def default_beta_grid(levels: LevelData, points: int = 50) -> np.ndarray:
    return np.linspace(0.0, 3.0 * float(levels.beta[-1]), points)


def phase_points(levels: LevelData, beta: float) -> PhaseDiagram:
    """Regime index, ``x_j = beta_j / beta`` and the coalescent times."""
    b = np.asarray(levels.beta, dtype=float)
    m = int(np.sum(b < beta))
    x = b / beta if beta > 0 else np.full_like(b, np.inf)
    if m == 0:
        return PhaseDiagram(beta, 0, x, np.zeros(0))
    K = len(b)
    xs = np.concatenate([[0.0], x])
    with np.errstate(divide="ignore"):
        t = np.array([math.log(xs[K] / xs[K - j]) if xs[K - j] > 0 else math.inf for j in range(K + 1)])
    return PhaseDiagram(beta, m, x, t)


def random_spec(rng, n: int, exact=False):
    """A random valid model on ``n`` coordinates (used for oracle checks)."""
    from .model import validate_model

    full = (1 << n) - 1
    while True:
        k = int(rng.integers(1, min(full, 2 * n + 1) + 1))
        fam = sorted(set(int(x) for x in rng.integers(1, full + 1, size=k)))
        cover = 0
        for J in fam:
            cover |= J
        if cover == full:
            break
    w = rng.random(len(fam)) + 0.05
    w = w / w.sum()
    g = rng.random(n) + 0.05
    g = g / g.sum()
    weights = {J: float(v) for J, v in zip(fam, w)}
    return validate_model(n, g.tolist(), weights, renormalize=True, exact=exact, name=f"random-n{n}")
