"""Limit objects: critical constants, Ruelle cascades and Poisson-Dirichlet weights."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .chain import Chain, CriticalReport, LevelData
from .errors import GremError
from .gibbs import MarkedPairMeasure
from .model import ModelSpec

DEFAULT_POINTS_PER_BRANCH = 50
DEFAULT_BRANCH_CAP = 10_000
_CHUNK = 1 << 18


def _rng(*key):
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


# -- critical constants -------------------------------------------------------------

@dataclass
class ConstantEstimate:
    level: int
    C: float
    se: float
    samples: int
    seed: int

    def to_dict(self) -> dict:
        return {"level": self.level, "C": self.C, "se": self.se,
                "samples": self.samples, "seed": self.seed}


def _orthant_hits(spec: ModelSpec, crits, samples: int, seed: int, level: int, chunk: int = _CHUNK) -> int:
    fam = sorted({J for c in crits for J in c.family + c.family_c})
    pos = {J: k for k, J in enumerate(fam)}
    coef = np.zeros((len(crits), len(fam)))
    for r, c in enumerate(crits):
        for J in c.family:
            coef[r, pos[J]] += 1.0 / c.alpha_hat
        for J in c.family_c:
            coef[r, pos[J]] -= 1.0 / c.alpha_hat_c
    sd = np.sqrt([spec.weights[J] for J in fam])
    hits = 0
    for k, start in enumerate(range(0, samples, chunk)):
        size = min(chunk, samples - start)
        y = _rng(seed, level, k).standard_normal((size, len(fam))) * sd
        hits += int(np.all(y @ coef.T <= 0.0, axis=1).sum())
    return hits


def estimate_critical_constants(spec: ModelSpec, chain: Chain, levels: LevelData,
                                criticals: CriticalReport, samples: int = 10 ** 6,
                                seed: int = 0) -> list[ConstantEstimate]:
    """Monte Carlo orthant probabilities per level (exactly 1 without criticals).

    Samples are generated in fixed chunks with seeds derived from
    ``(seed, level, chunk)``, so the estimate does not depend on how the chunks
    are scheduled. Raises ``DEGENERATE_CONSTANT`` when the probability is
    indistinguishable from zero (fewer than 5 standard errors).
    """
    if samples < 10 ** 4:
        raise ValueError("need at least 10^4 samples")
    out = []
    for j in range(1, chain.K + 1):
        crits = criticals.at(j)
        if not crits:
            out.append(ConstantEstimate(j, 1.0, 0.0, 0, int(seed)))
            continue
        hits = _orthant_hits(spec, crits, samples, seed, j)
        p = hits / samples
        se = math.sqrt(p * (1.0 - p) / samples)
        if p < 5.0 * math.sqrt(max(p, 1.0 / samples) / samples):
            raise GremError("DEGENERATE_CONSTANT",
                            f"C_{j} = {p:.3g} is not distinguishable from 0 (reducible model?)")
        out.append(ConstantEstimate(j, p, se, samples, int(seed)))
    return out


# -- cascades -----------------------------------------------------------------------

@dataclass
class CascadeSpec:
    """Level temperatures, constants and per-level truncation floors."""

    beta: tuple[float, ...]
    C: tuple[float, ...]
    floor: tuple[float, ...]
    branch_cap: int = DEFAULT_BRANCH_CAP

    def __post_init__(self):
        self.beta = tuple(float(b) for b in self.beta)
        self.C = tuple(float(c) for c in self.C)
        self.floor = tuple(float(f) for f in self.floor)
        if not len(self.beta) == len(self.C) == len(self.floor) >= 1:
            raise ValueError("beta, C and floor need one entry per level")
        for l, c in enumerate(self.C, 1):
            if not 0.0 < c <= 1.0:
                raise GremError("DEGENERATE_CONSTANT", f"C_{l}={c} outside (0, 1]")
        if not all(math.isfinite(f) for f in self.floor):
            raise ValueError("floors must be finite")
        if self.branch_cap < 1:
            raise ValueError("branch_cap must be >= 1")

    @property
    def K(self) -> int:
        return len(self.beta)

    def expected_count(self, l: int) -> float:
        """Mean number of points above the floor in one branch at level ``l``."""
        return self.C[l - 1] * math.exp(-self.beta[l - 1] * self.floor[l - 1])

    @classmethod
    def with_points(cls, beta, C, points_per_branch=DEFAULT_POINTS_PER_BRANCH, branch_cap=DEFAULT_BRANCH_CAP):
        """Floors chosen so each branch holds ``points_per_branch`` points on average."""
        pts = np.broadcast_to(np.asarray(points_per_branch, float), (len(beta),))
        floor = tuple(-math.log(p / c) / b for p, c, b in zip(pts, C, beta))
        # leave room for Poisson fluctuations when branches are large
        cap = max(int(branch_cap), int(2 * pts.max() + 10 * math.sqrt(pts.max()) + 10))
        return cls(tuple(beta), tuple(C), floor, cap)


def cascade_spec_for(levels: LevelData, constants=None, points_per_branch=DEFAULT_POINTS_PER_BRANCH,
                     branch_cap=DEFAULT_BRANCH_CAP) -> CascadeSpec:
    C = [1.0] * levels.K if constants is None else [c.C if hasattr(c, "C") else float(c) for c in constants]
    return CascadeSpec.with_points(levels.beta, C, points_per_branch, branch_cap)


def points_for_tail(level_beta, beta: float, tail: float = 1e-4, lo: int = DEFAULT_POINTS_PER_BRANCH,
                    hi: int = 20_000) -> list[int]:
    """Points per branch so each level loses about ``tail / K`` of the mass.

    With ``x = beta_l / beta`` the mass below the ``n``-th point scales like
    ``n^(1 - 1/x)``.
    """
    K = len(level_beta)
    out = []
    for bl in level_beta:
        x = float(bl) / beta
        if not 0.0 < x < 1.0:
            raise GremError("REGIME_MISMATCH", f"beta={beta} must exceed every level temperature")
        n = (tail / K) ** (x / (x - 1.0))
        out.append(int(min(hi, max(lo, math.ceil(n)))))
    return out


@dataclass
class CascadeSample:
    """Points of a truncated cascade indexed by multi-indices.

    ``index[p]`` is the multi-index of point ``p`` (0-based, ordered by
    decreasing level value within each branch) and ``u[p, l]`` its level-``l``
    value; ``y = u.sum(axis=1)``.
    """

    cspec: CascadeSpec
    index: np.ndarray
    u: np.ndarray
    seed: int

    @property
    def y(self) -> np.ndarray:
        return self.u.sum(axis=1)

    def __len__(self):
        return self.index.shape[0]

    def weights(self, beta: float) -> np.ndarray:
        if len(self) == 0:
            return np.zeros(0)
        e = beta * self.y
        e = np.exp(e - e.max())
        return e / e.sum()

    def common_levels(self, p: np.ndarray, q: np.ndarray) -> np.ndarray:
        """Length of the common multi-index prefix of point pairs."""
        eq = self.index[p] == self.index[q]
        return np.cumprod(eq, axis=1).sum(axis=1)

    def shifted(self, shifts) -> "CascadeSample":
        return CascadeSample(self.cspec, self.index, self.u + np.asarray(shifts, float), self.seed)


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer, elementwise on uint64 (wrapping arithmetic)."""
    x = x ^ (x >> np.uint64(30))
    x = x * _MIX1
    x = x ^ (x >> np.uint64(27))
    x = x * _MIX2
    return x ^ (x >> np.uint64(31))


def _child_keys(keys: np.ndarray, ranks: np.ndarray) -> np.ndarray:
    return _mix(keys + (ranks.astype(np.uint64) + np.uint64(1)) * _GOLDEN)


def _arrivals(keys: np.ndarray, m: int) -> np.ndarray:
    """First ``m`` arrivals of a unit-rate Poisson stream per branch key."""
    k = np.arange(m, dtype=np.uint64)
    raw = _mix(keys[:, None] ^ _mix(k * _GOLDEN + np.uint64(0x5851F42D4C957F2D)))
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    return np.cumsum(-np.log(u), axis=1)


def sample_cascade(cspec: CascadeSpec, seed: int) -> CascadeSample:
    """One truncated cascade.

    In every branch at level ``l`` the points above the floor are
    ``(log C_l - log Gamma_i) / beta_l`` for the arrivals ``Gamma_i`` of a
    unit-rate Poisson process, i.e. a Poisson number of points with density
    ``C_l beta_l exp(-beta_l t)``. Branches and levels are independent.

    Each branch draws its arrivals from a counter hash keyed by its
    multi-index, so the sample does not depend on assembly order and
    lowering a floor only appends later arrivals to existing branches.
    """
    root = np.random.SeedSequence([int(seed), 0x6361]).generate_state(1, np.uint64)
    keys = _mix(root)
    index = np.zeros((1, 0), dtype=np.int64)
    u = np.zeros((1, 0))
    cap = cspec.branch_cap
    with np.errstate(over="ignore"):
        for l in range(1, cspec.K + 1):
            lam = cspec.expected_count(l)
            lkeys = _mix(keys ^ (np.uint64(l) * _GOLDEN))
            m = min(cap + 1, int(math.ceil(lam + 6.0 * math.sqrt(lam) + 10.0)))
            gam = _arrivals(lkeys, m)
            if np.any(gam[:, -1] <= lam) and m < cap + 1:
                m = cap + 1
                gam = _arrivals(lkeys, m)
            inside = gam <= lam
            counts = inside.sum(axis=1)
            if counts.max(initial=0) > cap:
                raise GremError("CAP_EXCEEDED", f"a level-{l} branch holds more than {cap} points")
            owner, rank = np.nonzero(inside)
            vals = (math.log(cspec.C[l - 1]) - np.log(gam[owner, rank])) / cspec.beta[l - 1]
            index = np.concatenate([index[owner], rank[:, None]], axis=1)
            u = np.concatenate([u[owner], vals[:, None]], axis=1)
            keys = _child_keys(keys[owner], rank)
    return CascadeSample(cspec, index, u, int(seed))


def cascade_maxima(beta: float, C: float, samples: int, seed: int) -> np.ndarray:
    """Largest point of independent one-level cascades.

    The top point is the first arrival of the unit-rate stream; truncation
    does not affect it as long as the floor lies below it.
    """
    gam = _rng(seed, 0x6D61).exponential(size=samples)
    return (math.log(C) - np.log(gam)) / beta


def tail_mass_by_level(sample: CascadeSample, beta: float) -> np.ndarray:
    """Estimated share of ``sum exp(beta y)`` lost below each level's floor.

    Per level, the realized mass of points whose level value sits within
    ``1/beta_l`` above the floor is scaled by the ratio of the exponential
    density's mass below the floor to that band.
    """
    cs = sample.cspec
    if any(beta <= bl for bl in cs.beta):
        return np.full(cs.K, math.inf)
    if len(sample) == 0:
        return np.zeros(cs.K)
    e = np.exp(beta * sample.y - beta * sample.y.max())
    total = e.sum()
    est = np.empty(cs.K)
    for l in range(cs.K):
        bl = cs.beta[l]
        width = 1.0 / bl
        band = sample.u[:, l] < cs.floor[l] + width
        est[l] = e[band].sum() / math.expm1((beta - bl) * width) / total
    return est


def tail_mass_fraction(sample: CascadeSample, beta: float) -> float:
    """Estimated share of ``sum exp(beta y)`` lost below the floors (all levels)."""
    return float(tail_mass_by_level(sample, beta).sum())


def sample_limit_cascade(cspec: CascadeSpec, beta: float, seed: int, max_tail: float = 1e-3,
                         rounds: int = 12) -> CascadeSample:
    """Sample, then lower the floors of levels whose tail estimate is too large.

    The tail mass is heavy tailed: now and then a point near a floor carries
    a large subtree. Because lowering a floor only appends points to the same
    realization, refining the floors of one seed is consistent. Each round
    doubles the expected count of the offending levels; after ``rounds``
    the last sample is returned as is.
    """
    smp = sample_cascade(cspec, seed)
    for _ in range(rounds):
        est = tail_mass_by_level(smp, beta)
        if est.sum() <= max_tail:
            break
        bad = est > max_tail / cspec.K
        if not bad.any():
            bad = est == est.max()
        floor = tuple(f - (math.log(2.0) / b if k else 0.0) for f, b, k in zip(cspec.floor, cspec.beta, bad))
        lam = max(c * math.exp(-b * f) for c, b, f in zip(cspec.C, cspec.beta, floor))
        cap = max(cspec.branch_cap, int(2 * lam + 10 * math.sqrt(lam) + 10))
        cspec = CascadeSpec(cspec.beta, cspec.C, floor, cap)
        smp = sample_cascade(cspec, seed)
    return smp


def tree_pairs(sample: CascadeSample, chain: Chain, weights: np.ndarray) -> MarkedPairMeasure:
    p, q = np.triu_indices(len(sample), k=1)
    m = sample.common_levels(p, q) if p.size else np.zeros(0, dtype=np.int64)
    sets = np.asarray(chain.sets, dtype=np.int64)
    return MarkedPairMeasure(weights[p], weights[q], sets[m], 1.0, float(np.sum(weights * weights)))


def cascade_to_limit_law(sample: CascadeSample, beta: float, chain: Chain | None = None,
                         max_tail: float = 1e-3, coverage_target: float = 0.999):
    """Normalized weights ``exp(beta y) / sum`` and their tree-marked pairs.

    Returns ``(pairs, weights, tail)``: weights sorted decreasingly, pairs
    among the heaviest points holding ``coverage_target`` of the mass (the
    rule used for finite-N pair measures), and the estimated mass fraction
    lost to truncation. Raises ``POOR_TRUNCATION`` above ``max_tail``.
    """
    cs = sample.cspec
    if not beta > cs.beta[-1]:
        raise GremError("REGIME_MISMATCH", f"beta={beta} must exceed beta_K={cs.beta[-1]}")
    tail = tail_mass_fraction(sample, beta)
    if tail > max_tail:
        raise GremError("POOR_TRUNCATION", f"estimated tail mass {tail:.2e} > {max_tail:.0e}; lower the floors")
    w = sample.weights(beta)
    order = np.argsort(-w, kind="stable")
    w = w[order]
    M = min(w.size, int(np.searchsorted(np.cumsum(w), coverage_target * (1 - 1e-15))) + 1)
    if chain is None:
        chain = Chain(tuple((1 << m) - 1 for m in range(cs.K + 1)))
    top = _reorder(sample, order[:M])
    pairs = tree_pairs(top, chain, w[:M])
    pairs.coverage = float(w[:M].sum())
    return pairs, w, tail


def _reorder(sample: CascadeSample, order) -> CascadeSample:
    return CascadeSample(sample.cspec, sample.index[order], sample.u[order], sample.seed)


# -- Poisson-Dirichlet ------------------------------------------------------------------

def pd_floor(x: float, expected_points: float) -> float:
    """Floor ``t`` leaving ``expected_points`` atoms of density ``x t^{-x-1}`` above it."""
    return expected_points ** (-1.0 / x)


def sample_pd(x: float, floor: float, seed: int) -> np.ndarray:
    """Normalized atoms of a PPP with density ``x t^{-x-1} dt`` above ``floor``, decreasing."""
    if not 0.0 < x < 1.0:
        raise ValueError("x must lie in (0, 1)")
    rng = _rng(seed, 0x7064)
    lam = floor ** (-x)
    k = rng.poisson(lam)
    gam = np.sort(rng.random(k) * lam)
    t = gam ** (-1.0 / x)
    return t / t.sum() if k else t


def pd_moments(x: float, floor: float, samples: int, seed: int, orders=(2, 3)) -> dict:
    """``sum w^k`` per sample for many independent PD draws (vectorized)."""
    if not 0.0 < x < 1.0:
        raise ValueError("x must lie in (0, 1)")
    lam = floor ** (-x)
    out = {k: np.empty(samples) for k in orders}
    batch = max(1, int(4e6 // max(lam, 1.0)))
    for b, start in enumerate(range(0, samples, batch)):
        size = min(batch, samples - start)
        rng = _rng(seed, 0x7064, b)
        counts = rng.poisson(lam, size=size)
        owner = np.repeat(np.arange(size), counts)
        t = (rng.random(owner.size) * lam) ** (-1.0 / x)
        s = np.bincount(owner, weights=t, minlength=size)
        for k in orders:
            sk = np.bincount(owner, weights=t ** k, minlength=size)
            with np.errstate(invalid="ignore", divide="ignore"):
                out[k][start:start + size] = sk / s ** k
    return out


# -- Brownian bridge ----------------------------------------------------------------------

def bridge_orthant(times, samples: int, seed: int):
    """Monte Carlo of ``P[B(s_1) <= 0, ..., B(s_j) <= 0]`` for a standard bridge.

    Returns ``(estimate, standard_error)``. Repeated times are merged.
    """
    s = np.unique(np.asarray(times, dtype=float))
    if s.size == 0 or s[0] <= 0.0 or s[-1] >= 1.0:
        raise ValueError("times must lie in (0, 1)")
    rng = _rng(seed, 0x6262)
    hits = 0
    grid = np.concatenate([s, [1.0]])
    dt = np.diff(np.concatenate([[0.0], grid]))
    for start in range(0, samples, _CHUNK):
        size = min(_CHUNK, samples - start)
        w = np.cumsum(rng.standard_normal((size, grid.size)) * np.sqrt(dt), axis=1)
        b = w[:, :-1] - s * w[:, -1:]
        hits += int(np.all(b <= 0.0, axis=1).sum())
    p = hits / samples
    return p, math.sqrt(p * (1.0 - p) / samples)


def gaussian_orthant(cov, samples: int, seed: int):
    """Monte Carlo of ``P[Z <= 0]`` for a centered Gaussian vector with ``cov``."""
    rng = _rng(seed, 0x676F)
    L = np.linalg.cholesky(np.asarray(cov, float))
    hits = 0
    for start in range(0, samples, _CHUNK):
        size = min(_CHUNK, samples - start)
        z = rng.standard_normal((size, L.shape[0])) @ L.T
        hits += int(np.all(z <= 0.0, axis=1).sum())
    p = hits / samples
    return p, math.sqrt(p * (1.0 - p) / samples)
