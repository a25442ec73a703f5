"""Finite-N Gaussian fields, energies, centerings, extremes and thinning.

Random numbers: every table ``X^J`` has its own Philox stream keyed by
``(seed, J)``; entry ``k`` of the table (C-order over the coordinates of ``J``)
is the ``k``-th raw 64-bit output of that stream. Uniforms are
``((raw >> 11) + 0.5) / 2**53`` and Gaussians their inverse normal CDF, so a
table is reproducible bit-for-bit regardless of generation order or threads.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.optimize import linprog
from scipy.special import ndtri

from .chain import Chain, CriticalReport, LevelData, phase_points
from .errors import GremError, GremWarning
from .model import ModelSpec, members, submasks

MAX_CONFIGS = 1 << 28
_U53 = 2.0 ** -53
_BLOCK = 1 << 22


@dataclass(frozen=True)
class SizeParams:
    N: int
    bits: tuple[int, ...]

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(1 << b for b in self.bits)

    @property
    def n_configs(self) -> int:
        return 1 << sum(self.bits)


def size_params(spec: ModelSpec, N: int, guard: int = MAX_CONFIGS) -> SizeParams:
    """Per-coordinate bit counts ``gamma_i * N``; they must be integers."""
    if N < 1:
        raise GremError("INVALID_N", f"N={N} must be positive")
    bits = []
    bad = []
    for i, g in enumerate(spec.gamma, 1):
        v = g * N
        r = round(v)
        if abs(v - r) > 1e-9 or r < 1:
            bad.append(f"gamma_{i}*N={v:.6g}")
        bits.append(int(r))
    if bad:
        raise GremError("INVALID_N", f"N={N}: non-integral {', '.join(bad)}")
    if sum(bits) != N:
        raise GremError("INVALID_N", f"N={N}: bits {bits} do not sum to N")
    if (1 << N) > guard:
        raise GremError("SIZE_GUARD", f"2^{N} configurations exceed the guard {guard}")
    return SizeParams(N, tuple(bits))


def valid_sizes(spec: ModelSpec, upto: int = 28) -> list[int]:
    out = []
    for N in range(1, upto + 1):
        try:
            size_params(spec, N)
        except GremError:
            continue
        out.append(N)
    return out


def replica_seed(seed: int, r: int) -> int:
    """Seed of replica ``r`` derived from a base seed."""
    return int(np.random.SeedSequence([int(seed), int(r)]).generate_state(1, np.uint64)[0])


def _stream(seed: int, J: int) -> np.random.Philox:
    key = np.random.SeedSequence([int(seed), int(J), 0x6E68]).generate_state(2, np.uint64)
    return np.random.Philox(key=key)


def _gauss(raw: np.ndarray) -> np.ndarray:
    return ndtri(((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _U53)


def _table(spec: ModelSpec, size: SizeParams, seed: int, J: int) -> np.ndarray:
    dims = tuple(size.dims[i - 1] for i in members(J))
    raw = _stream(seed, J).random_raw(int(np.prod(dims)))
    return (_gauss(raw) * math.sqrt(spec.weights[J] * size.N)).reshape(dims)


@dataclass(eq=False)
class FieldRealization:
    """One disorder sample: a Gaussian table for each ``J`` in the family."""

    spec: ModelSpec
    size: SizeParams
    seed: int
    tables: dict

    def table_view(self, J: int) -> np.ndarray:
        """Table of ``J`` reshaped to broadcast over the full configuration space."""
        shape = [1] * self.spec.n
        for i in members(J):
            shape[i - 1] = self.size.dims[i - 1]
        return self.tables[J].reshape(shape)

    def sum_tables(self, family) -> np.ndarray:
        """Full-space array of ``sum_{J in family} X^J`` (zeros if empty)."""
        out = np.zeros(self.size.dims)
        for J in family:
            out += self.table_view(J)
        return out

    @cached_property
    def energy(self) -> np.ndarray:
        """``X_sigma`` over all configurations (C-order, coordinate 1 slowest)."""
        return self.sum_tables(self.spec.family)

    def level_family(self, chain: Chain, j: int) -> list[int]:
        prev, cur = chain.sets[j - 1], chain.sets[j]
        return [J for J in self.spec.family if J & ~cur == 0 and J & ~prev != 0]

    def level_energy(self, chain: Chain, j: int) -> np.ndarray:
        return self.sum_tables(self.level_family(chain, j))

    def value(self, J: int, sigma) -> float:
        return float(self.tables[J][tuple(sigma[i - 1] for i in members(J))])

    def iter_blocks(self, block: int = _BLOCK):
        """Yield ``(start, X_block)`` over flat configuration ranges."""
        total = self.size.n_configs
        dims = self.size.dims
        for start in range(0, total, block):
            idx = np.unravel_index(np.arange(start, min(total, start + block)), dims)
            x = np.zeros(idx[0].shape)
            for J in self.spec.family:
                x += self.tables[J][tuple(idx[i - 1] for i in members(J))]
            yield start, x


def sample_field(spec: ModelSpec, size: SizeParams, seed: int, workers: int = 1) -> FieldRealization:
    """Draw every table ``X^J`` with variance ``a_J * N`` for one seed."""
    if size.n_configs > MAX_CONFIGS:
        raise GremError("SIZE_GUARD", f"{size.n_configs} configurations exceed {MAX_CONFIGS}")
    fam = spec.family
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            tabs = list(ex.map(lambda J: _table(spec, size, seed, J), fam))
    else:
        tabs = [_table(spec, size, seed, J) for J in fam]
    return FieldRealization(spec, size, int(seed), dict(zip(fam, tabs)))


def max_energy(spec: ModelSpec, size: SizeParams, seed: int) -> float:
    """``max_sigma X_sigma`` for the realization of ``seed``.

    Single-table models (family ``{I}``) take the maximum on the raw stream
    and transform once; the result equals ``sample_field(...).energy.max()``.
    """
    if spec.family == (spec.full,):
        raw = _stream(seed, spec.full).random_raw(size.n_configs)
        return float(_gauss(raw.max(keepdims=True))[0] * math.sqrt(size.N))
    return float(sample_field(spec, size, seed).energy.max())


# -- centering -------------------------------------------------------------

def level_centering(beta_j: float, alpha_hat: float, N: int) -> float:
    """``a_{N,j}(A)`` for a level temperature and a weight ``alpha_hat > 0``.

    The constant term enters with a minus sign so that the number of points
    above the centering tends to one (mean of the limiting exponential
    density on ``[0, inf)``).
    """
    return (beta_j * alpha_hat * N - math.log(N) / (2.0 * beta_j)
            - math.log(beta_j * math.sqrt(2.0 * math.pi * alpha_hat)) / beta_j)


@dataclass
class Centering:
    N: int
    chain: Chain
    beta_levels: np.ndarray
    delta: np.ndarray
    g: np.ndarray
    level: np.ndarray
    beta: float | None = None
    m: int | None = None
    a_N_m: float | None = None

    @property
    def a_N(self) -> float:
        return float(self.level.sum())

    def subset_value(self, spec: ModelSpec, j: int, A: int) -> float:
        """``a_{N,j}(A)`` for ``A`` inside the level increment ``j``."""
        prev = self.chain.sets[j - 1]
        a_hat = spec.alpha(A | prev) - spec.alpha(prev)
        if not a_hat > 0:
            raise GremError("ZERO_LEVEL_WEIGHT", f"alpha_hat of {members(A)} at level {j} is 0")
        return level_centering(float(self.beta_levels[j - 1]), a_hat, self.N)

    def partial(self, m: int, beta: float) -> float:
        """``a_N^m``: frozen levels up to ``m`` plus the high-temperature tail."""
        tail = sum(beta * d * self.N / 2.0 + gg * self.N * math.log(2.0) / beta
                   for d, gg in zip(self.delta[m:], self.g[m:]))
        return float(self.level[:m].sum() + tail)

    def to_dict(self) -> dict:
        return {"N": self.N, "a_level": self.level.tolist(), "a_N": self.a_N,
                "beta": self.beta, "m": self.m, "a_N_m": self.a_N_m}


def compute_centering(spec: ModelSpec, chain: Chain, levels: LevelData, size, beta=None,
                      criticals: CriticalReport | None = None) -> Centering:
    N = size.N if isinstance(size, SizeParams) else int(size)
    lv = np.array([level_centering(float(b), float(d), N) for b, d in zip(levels.beta, levels.delta)])
    c = Centering(N, chain, np.asarray(levels.beta, float), np.asarray(levels.delta, float),
                  np.asarray(levels.g, float), lv)
    if beta is not None:
        c.beta = float(beta)
        c.m = phase_points(levels, beta).m
        # the high-temperature tail carries G ln2 / beta, undefined at beta = 0
        c.a_N_m = c.partial(c.m, beta) if beta > 0 else None
    return c


# -- energies and extremes -----------------------------------------------------

@dataclass
class Energies:
    X: float
    level: np.ndarray
    centered: np.ndarray
    partial: np.ndarray


def energies(real: FieldRealization, chain: Chain, centering: Centering, sigma) -> Energies:
    """Energy of one configuration, split by chain level and centered."""
    sigma = tuple(int(s) for s in sigma)
    level = np.array([sum(real.value(J, sigma) for J in real.level_family(chain, j))
                      for j in range(1, chain.K + 1)])
    centered = level - centering.level
    partial = np.cumsum(centered)
    X = sum(real.value(J, sigma) for J in real.spec.family)
    return Energies(float(X), level, centered, partial)


def extremal_points(real: FieldRealization, centering: Centering, window=(-10.0, math.inf)):
    """Configurations with ``X_sigma - a_N`` in the half-open ``window``.

    Returns ``(sigmas, values)`` sorted by decreasing value; ``sigmas`` is an
    ``(count, n)`` integer array of 0-based coordinate indices. Enumeration is
    streamed in blocks.
    """
    lo, hi = window
    a_N = centering.a_N
    hits_idx, hits_val = [], []
    if hi > lo:
        for start, x in real.iter_blocks():
            y = x - a_N
            sel = np.nonzero((y >= lo) & (y < hi))[0]
            if sel.size:
                hits_idx.append(sel + start)
                hits_val.append(y[sel])
    if not hits_idx:
        return np.zeros((0, real.spec.n), dtype=np.int64), np.zeros(0)
    idx = np.concatenate(hits_idx)
    val = np.concatenate(hits_val)
    order = np.argsort(-val, kind="stable")
    sig = np.stack(np.unravel_index(idx[order], real.size.dims), axis=1)
    return sig, val[order]


def window_count(real: FieldRealization, a_N: float, lo: float, hi: float = math.inf) -> int:
    if not hi > lo:
        return 0
    total = 0
    for _, x in real.iter_blocks():
        y = x - a_N
        total += int(np.count_nonzero((y >= lo) & (y < hi)))
    return total


# -- thinning ------------------------------------------------------------------------

def t1_satisfiable(criticals) -> bool:
    """Whether the T1 inequalities of a level's critical subsets can hold jointly.

    Linear feasibility of ``stat_A(y) <= -1`` for all critical ``A`` over the
    table values ``y_J`` (by scaling, equivalent to strict negativity).
    """
    if not criticals:
        return True
    fam = sorted({J for c in criticals for J in c.family + c.family_c})
    pos = {J: k for k, J in enumerate(fam)}
    rows = []
    for c in criticals:
        row = np.zeros(len(fam))
        for J in c.family:
            row[pos[J]] += 1.0 / c.alpha_hat
        for J in c.family_c:
            row[pos[J]] -= 1.0 / c.alpha_hat_c
        rows.append(row)
    res = linprog(np.zeros(len(fam)), A_ub=np.array(rows), b_ub=-np.ones(len(rows)),
                  bounds=[(None, None)] * len(fam), method="highs")
    return res.status == 0


def _check_t1(criticals, k):
    if not t1_satisfiable(criticals):
        warnings.warn(GremWarning("DEGENERATE_T1",
                                  f"T1 cannot hold for all critical subsets at level {k}"), stacklevel=3)
        return False
    return True


def t1_statistic(real: FieldRealization, crit) -> np.ndarray:
    """Full-space array of the T1 difference statistic for one critical subset."""
    return (real.sum_tables(crit.family) / crit.alpha_hat
            - real.sum_tables(crit.family_c) / crit.alpha_hat_c)


def _t2_subsets(spec: ModelSpec, chain: Chain, k: int):
    prev = chain.sets[k - 1]
    out = []
    for A in sorted(submasks(chain.increment(k))):
        a_hat = spec.alpha(A | prev) - spec.alpha(prev)
        if a_hat > 0:
            fam = [J for J in spec.family if J & ~(A | prev) == 0 and J & ~prev != 0]
            out.append((A, a_hat, fam))
    return out


def thinning_filter(real: FieldRealization, chain: Chain, levels: LevelData, criticals: CriticalReport,
                    k: int, eps1: float, eps2: float, sigma):
    """T1 and T2 verdicts for one configuration at level ``k``.

    Returns ``(t1, t2)`` dicts keyed by subset mask. Emits a ``DEGENERATE_T1``
    warning when the critical family makes T1 unsatisfiable.
    """
    if eps1 <= 0 or eps2 <= 0:
        raise ValueError("eps1 and eps2 must be positive")
    sigma = tuple(int(s) for s in sigma)
    N = real.size.N
    crits = criticals.at(k)
    _check_t1(crits, k)
    t1 = {}
    for c in crits:
        s = (sum(real.value(J, sigma) for J in c.family) / c.alpha_hat
             - sum(real.value(J, sigma) for J in c.family_c) / c.alpha_hat_c)
        t1[c.subset] = bool(s <= -eps1 * math.sqrt(N))
    bk = float(levels.beta[k - 1])
    t2 = {}
    for A, a_hat, fam in _t2_subsets(real.spec, chain, k):
        t2[A] = bool(sum(real.value(J, sigma) for J in fam) <= bk * a_hat * (1.0 + eps2) * N)
    return t1, t2


def thinning_masks(real: FieldRealization, chain: Chain, levels: LevelData, criticals: CriticalReport,
                   k: int, eps1: float, eps2: float):
    """Vectorized :func:`thinning_filter` over all configurations."""
    N = real.size.N
    crits = criticals.at(k)
    _check_t1(crits, k)
    t1 = {c.subset: t1_statistic(real, c) <= -eps1 * math.sqrt(N) for c in crits}
    bk = float(levels.beta[k - 1])
    t2 = {A: real.sum_tables(fam) <= bk * a_hat * (1.0 + eps2) * N
          for A, a_hat, fam in _t2_subsets(real.spec, chain, k)}
    return t1, t2
