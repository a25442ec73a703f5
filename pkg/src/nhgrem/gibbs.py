"""Exact Gibbs measures at finite N and the statistics built on them."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from .chain import Chain, LevelData
from .errors import GremError
from .field import (Centering, FieldRealization, SizeParams, compute_centering, replica_seed, sample_field,
                    size_params)
from .model import ModelSpec, members

LN2 = math.log(2.0)


@dataclass(eq=False)
class GibbsTable:
    """Normalized Gibbs weights over a configuration space.

    ``coords`` lists the (1-based) coordinates indexing the axes of
    ``weights``; a full table has all of ``1..n``, a marginal a subset.
    ``log_partition`` is ``f_N(beta) = (1/N) log tr exp(beta X)``.
    """

    beta: float
    N: int
    weights: np.ndarray
    coords: tuple[int, ...]
    log_partition: float = float("nan")

    @cached_property
    def flat(self) -> np.ndarray:
        return self.weights.reshape(-1)

    @cached_property
    def cdf(self) -> np.ndarray:
        return np.cumsum(self.flat)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.weights.shape


def gibbs_table(real: FieldRealization, centering: Centering | None, beta: float) -> GibbsTable:
    """Exact Gibbs weights ``exp(beta (X - a_N)) / Z``.

    The log-sum uses a max shift, so large ``beta * N`` cannot overflow.
    """
    a_N = centering.a_N if centering is not None else 0.0
    e = real.energy - a_N
    e *= beta
    shift = float(e.max())
    e -= shift
    np.exp(e, out=e)
    Z = float(e.sum())
    e /= Z
    N = real.size.N
    f_N = (shift + beta * a_N + math.log(Z) - N * LN2) / N
    return GibbsTable(float(beta), N, e, tuple(range(1, real.spec.n + 1)), f_N)


def marginal_gibbs(table: GibbsTable, chain: Chain, m: int) -> GibbsTable:
    """Marginal of the table on the coordinates of ``A_m``."""
    if not 1 <= m <= chain.K:
        raise GremError("BAD_LEVEL", f"m={m} outside 1..{chain.K}")
    return marginal_on(table, chain.sets[m])


def marginal_on(table: GibbsTable, A: int) -> GibbsTable:
    keep = members(A)
    if any(c not in table.coords for c in keep):
        raise GremError("BAD_SUBSET", f"{keep} not within table coordinates {table.coords}")
    drop = tuple(ax for ax, c in enumerate(table.coords) if c not in keep)
    w = table.weights.sum(axis=drop) if drop else table.weights
    return GibbsTable(table.beta, table.N, w, tuple(keep), table.log_partition)


def overlap(sigma, tau) -> int:
    """Mask of the coordinates where two configurations agree."""
    q = 0
    for i, (a, b) in enumerate(zip(sigma, tau)):
        if a == b:
            q |= 1 << i
    return q


def overlap_masks(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise overlap masks of two ``(count, n)`` configuration arrays."""
    eq = (a == b).astype(np.int64)
    return (eq << np.arange(a.shape[1], dtype=np.int64)).sum(axis=1)


def overlap_and_distance(spec: ModelSpec, size: SizeParams, sigma, tau):
    """Overlap mask and covariance distance ``sqrt(2N(1 - alpha(q)))``."""
    q = overlap(sigma, tau)
    d = math.sqrt(max(0.0, 2.0 * size.N * (1.0 - spec.alpha(q))))
    return q, d


def draw_configs(table: GibbsTable, count: int, seed: int) -> np.ndarray:
    """I.i.d. draws from the table by inverse CDF; rows are configurations."""
    rng = np.random.default_rng(seed)
    cdf = table.cdf
    u = rng.random(count) * cdf[-1]
    idx = np.minimum(np.searchsorted(cdf, u, side="right"), cdf.size - 1)
    return np.stack(np.unravel_index(idx, table.dims), axis=1)


# -- ultrametricity -----------------------------------------------------------

def triple_violations(spec: ModelSpec, s1, s2, s3) -> np.ndarray:
    """Boolean per triple: the distance fails the ultrametric inequality.

    A triple is ultrametric in every ordering iff the two smallest of its
    three ``alpha(q)`` values coincide (the two largest distances are equal).
    """
    at = np.round(spec.alpha_table, 12)
    a = np.stack([at[overlap_masks(s1, s2)], at[overlap_masks(s2, s3)], at[overlap_masks(s1, s3)]], axis=1)
    a.sort(axis=1)
    return a[:, 0] != a[:, 1]


@dataclass
class UltrametricReport:
    beta: float
    N: int
    triples: int
    violations: int
    seed: int
    samples: tuple = field(default=(), repr=False)

    @property
    def fraction(self) -> float:
        return self.violations / self.triples

    @property
    def se(self) -> float:
        p = self.fraction
        return math.sqrt(p * (1.0 - p) / self.triples)

    def to_dict(self) -> dict:
        return {"beta": self.beta, "N": self.N, "triples": self.triples,
                "violations": self.violations, "fraction": self.fraction,
                "se": self.se, "seed": self.seed}


def ultrametric_stats(table: GibbsTable, spec: ModelSpec, triples: int, seed: int,
                      keep_samples=False) -> UltrametricReport:
    """Fraction of Gibbs triples violating the ultrametric inequality."""
    draws = draw_configs(table, 3 * triples, seed)
    s1, s2, s3 = draws[:triples], draws[triples:2 * triples], draws[2 * triples:]
    v = int(triple_violations(spec, s1, s2, s3).sum())
    return UltrametricReport(table.beta, table.N, triples, v, int(seed),
                             (s1, s2, s3) if keep_samples else ())


def ultrametric_batch(spec: ModelSpec, chain: Chain, levels: LevelData, beta: float, N: int,
                      replicas: int, triples: int, seed: int) -> float:
    """Pooled violation fraction over ``replicas`` disorder samples."""
    size = size_params(spec, N)
    cen = compute_centering(spec, chain, levels, size, beta)
    v = t = 0
    for r in range(replicas):
        rs = replica_seed(seed, r)
        rep = ultrametric_stats(gibbs_table(sample_field(spec, size, rs), cen, beta), spec, triples, rs)
        v += rep.violations
        t += rep.triples
    return v / t


def is_nonultrametric_couple(sigma, tau, chain: Chain):
    """``(True, (k, s))`` if some ``s`` in ``A_k \\ A_{k-1}`` agrees while ``A_k`` differs."""
    n = len(sigma)
    for k in range(1, chain.K + 1):
        Ak = chain.sets[k]
        coords = [i for i in range(1, n + 1) if Ak >> (i - 1) & 1]
        if all(sigma[i - 1] == tau[i - 1] for i in coords):
            continue
        for s in members(chain.increment(k)):
            if s <= n and sigma[s - 1] == tau[s - 1]:
                return True, (k, s)
    return False, None


# -- marked pair measure ---------------------------------------------------------

@dataclass
class MarkedPairMeasure:
    """Unordered distinct pairs of weights with their overlap marks."""

    w1: np.ndarray
    w2: np.ndarray
    marks: np.ndarray
    coverage: float
    diagonal: float = 0.0

    def __len__(self):
        return self.w1.size

    def swapped(self) -> "MarkedPairMeasure":
        return MarkedPairMeasure(self.w2, self.w1, self.marks, self.coverage, self.diagonal)


def pairs_from_points(weights: np.ndarray, configs: np.ndarray, coverage: float) -> MarkedPairMeasure:
    """All unordered pairs among ``configs`` (rows) with weights."""
    i, j = np.triu_indices(weights.size, k=1)
    marks = overlap_masks(configs[i], configs[j]) if i.size else np.zeros(0, dtype=np.int64)
    return MarkedPairMeasure(weights[i], weights[j], marks, float(coverage),
                             float(np.sum(weights * weights)))


def marked_pair_measure(table: GibbsTable, coverage_target: float = 0.999,
                        max_configs: int = 1 << 13) -> MarkedPairMeasure:
    """Pairs among the heaviest configurations holding ``coverage_target`` mass."""
    if not 0.0 < coverage_target <= 1.0:
        raise ValueError("coverage_target must lie in (0, 1]")
    flat = table.flat
    order = np.argsort(-flat, kind="stable")
    cum = np.cumsum(flat[order])
    M = int(np.searchsorted(cum, coverage_target * cum[-1] * (1 - 1e-15))) + 1
    M = min(M, flat.size)
    if M > max_configs:
        raise GremError("SIZE_GUARD", f"{M} configurations needed for coverage {coverage_target}")
    top = order[:M]
    configs = np.stack(np.unravel_index(top, table.dims), axis=1)
    return pairs_from_points(flat[top], configs, float(cum[M - 1]))


def mark_masses(pairs: MarkedPairMeasure) -> dict:
    """Ordered-pair mass ``2 w w'`` aggregated by mark."""
    out = {}
    if len(pairs):
        uniq, inv = np.unique(pairs.marks, return_inverse=True)
        mass = np.bincount(inv, weights=2.0 * pairs.w1 * pairs.w2)
        out = {int(u): float(m) for u, m in zip(uniq, mass)}
    return out


# -- layer fluctuations -------------------------------------------------------------

def layer_fluctuation(real: FieldRealization, chain: Chain, levels: LevelData, m: int,
                      beta: float, sigma_prefix) -> float:
    """``log(Z_sigma / E Z_sigma)`` for the high-temperature tail below ``A_m``.

    ``Z_sigma`` is the plain sum over tail configurations extending
    ``sigma_prefix`` (given in the coordinate order of ``A_m``).
    """
    K = chain.K
    b = [0.0] + list(levels.beta) + [math.inf]
    if not (b[m] < beta < b[m + 1]):
        raise GremError("REGIME_MISMATCH", f"beta={beta} outside ({b[m]}, {b[m + 1]})")
    if m == K:
        return 0.0
    N = real.size.N
    tail = np.zeros(real.size.dims)
    for j in range(m + 1, K + 1):
        tail += real.level_energy(chain, j)
    head = members(chain.sets[m])
    index = [slice(None)] * real.spec.n
    for c, s in zip(head, sigma_prefix):
        index[c - 1] = int(s)
    logZ = float(logsumexp(beta * tail[tuple(index)]))
    logEZ = sum(beta * beta * d * N / 2.0 + N * g * LN2
                for d, g in zip(levels.delta[m:], levels.g[m:]))
    return logZ - logEZ
