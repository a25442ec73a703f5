"""Comparisons between finite-N samples and their predicted limits."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .cascade import CascadeSample, tree_pairs
from .chain import Chain
from .field import compute_centering, replica_seed, sample_field, size_params
from .gibbs import MarkedPairMeasure, mark_masses
from .model import ModelSpec

Z_CRIT = 3.0
CSV_FIELDS = ("test", "statistic", "expected", "se", "z", "pass")


def load_calibration() -> dict:
    """Pilot-calibrated bounds shipped with the package (see scripts/calibrate.py)."""
    return json.loads(resources.files("nhgrem").joinpath("data/calibration.json").read_text(encoding="utf-8"))


@dataclass
class ComparisonReport:
    """One comparison: empirical statistic against a prediction.

    ``seeds`` and ``replicas`` are enough to regenerate the statistic.
    """

    test: str
    statistic: float
    expected: float
    se: float
    z: float
    passed: bool
    replicas: int = 0
    seeds: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"test": self.test, "statistic": self.statistic, "expected": self.expected,
                "se": self.se, "z": self.z, "pass": self.passed, "replicas": self.replicas,
                "seeds": self.seeds, "extra": self.extra}

    def json_line(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, default=_jsonable)

    def csv_row(self) -> list:
        return [self.test, _fmt(self.statistic), _fmt(self.expected), _fmt(self.se), _fmt(self.z),
                "PASS" if self.passed else "FAIL"]


def _fmt(v) -> str:
    return repr(float(v)) if v is not None else ""


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def summary_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()


def json_lines(reports) -> str:
    return "".join(r.json_line() + "\n" for r in reports)


# -- Poisson counts -----------------------------------------------------------------

def poisson_count_test(counts, expected_mean: float, z_crit: float = Z_CRIT,
                       name: str = "poisson_count", seeds=None) -> ComparisonReport:
    """Mean and variance of replica counts against Poisson(``expected_mean``).

    The variance z-score uses the exact sampling variance of the unbiased
    sample variance under the Poisson law.
    """
    c = np.asarray(counts, dtype=float)
    n = c.size
    if n < 100:
        raise ValueError(f"need at least 100 replica counts, got {n}")
    lam = float(expected_mean)
    mean = float(c.mean())
    var = float(c.var(ddof=1))
    se_mean = math.sqrt(lam / n)
    # Var(s^2) = (mu4 - sigma^4 (n-3)/(n-1)) / n with mu4 = lam + 3 lam^2
    se_var = math.sqrt((lam + 3 * lam * lam - lam * lam * (n - 3) / (n - 1)) / n)
    z_mean = (mean - lam) / se_mean
    z_var = (var - lam) / se_var
    passed = abs(z_mean) < z_crit and abs(z_var) < z_crit
    return ComparisonReport(name, mean, lam, se_mean, z_mean, passed, n, dict(seeds or {}),
                            {"variance": var, "z_variance": z_var, "se_variance": se_var,
                             "dispersion": var / mean if mean > 0 else math.inf})


# -- KS ------------------------------------------------------------------------------

@dataclass
class KSResult:
    statistic: float
    pvalue: float
    permutations: int
    seed: int

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "pvalue": self.pvalue,
                "permutations": self.permutations, "seed": self.seed}


def ks_statistic(a, b) -> float:
    a = np.sort(np.asarray(a, float))
    b = np.sort(np.asarray(b, float))
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def ks_distance(sample_a, sample_b, permutations: int = 199, seed: int = 0) -> KSResult:
    """Two-sample KS distance with a seeded permutation p-value."""
    a = np.asarray(sample_a, float)
    b = np.asarray(sample_b, float)
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    d = ks_statistic(a, b)
    if permutations <= 0:
        return KSResult(d, math.nan, 0, int(seed))
    rng = np.random.default_rng(seed)
    pooled = np.concatenate([a, b])
    hits = 0
    for _ in range(permutations):
        p = rng.permutation(pooled)
        if ks_statistic(p[:a.size], p[a.size:]) >= d - 1e-15:
            hits += 1
    return KSResult(d, (hits + 1) / (permutations + 1), int(permutations), int(seed))


# -- marks ---------------------------------------------------------------------------

@dataclass
class MarkMassReport:
    on_chain: dict
    off_chain: float
    off_marks: dict
    diagonal: float
    coverage: float

    def to_dict(self) -> dict:
        return {"on_chain": {str(k): v for k, v in self.on_chain.items()},
                "off_chain": self.off_chain,
                "off_marks": {str(k): v for k, v in self.off_marks.items()},
                "diagonal": self.diagonal, "coverage": self.coverage}


def mark_mass_report(pairs: MarkedPairMeasure, chain: Chain) -> MarkMassReport:
    """Ordered-pair mass ``w w'`` aggregated by mark, split on and off the chain."""
    masses = mark_masses(pairs)
    on = {A: masses.get(A, 0.0) for A in chain.sets}
    off = {q: m for q, m in masses.items() if q not in on}
    return MarkMassReport(on, float(sum(off.values())), off, pairs.diagonal, pairs.coverage)


# -- structure probes --------------------------------------------------------------------

def has_pair_with_mark(configs: np.ndarray, target: int, chunk: int = 256) -> bool:
    """Whether two distinct rows of ``configs`` have overlap exactly ``target``."""
    k, n = configs.shape
    bits = np.int64(1) << np.arange(n, dtype=np.int64)
    for s in range(0, k - 1, chunk):
        a = configs[s:s + chunk, None, :]
        b = configs[None, s + 1:, :]
        q = ((a == b) * bits).sum(axis=2)
        # keep only j > i
        upper = np.arange(s + 1, k)[None, :] > np.arange(s, s + a.shape[0])[:, None]
        if np.any((q == target) & upper):
            return True
    return False


@dataclass
class ProbeResult:
    N: int
    hits: int
    replicas: int
    mean_points: float

    @property
    def probability(self) -> float:
        return self.hits / self.replicas

    @property
    def se(self) -> float:
        p = self.probability
        return math.sqrt(max(p * (1 - p), 0.0) / self.replicas)

    def to_dict(self) -> dict:
        return {"N": self.N, "hits": self.hits, "replicas": self.replicas,
                "probability": self.probability, "se": self.se, "mean_points": self.mean_points}


def structure_probe(spec: ModelSpec, chain: Chain, levels, sizes, window, target: int,
                    replicas: int, seed: int, criticals=None) -> list[ProbeResult]:
    """Per N, the fraction of replicas with two window configurations marked ``target``.

    Window membership uses the centered energy ``X - a_N``; pairs are
    distinct configurations, so ``target = I`` never occurs.
    """
    lo, hi = window
    out = []
    for N in sizes:
        size = size_params(spec, N)
        cen = compute_centering(spec, chain, levels, size)
        hits, pts = 0, 0
        for r in range(replicas):
            real = sample_field(spec, size, replica_seed(seed, r))
            y = real.energy.reshape(-1) - cen.a_N
            idx = np.nonzero((y >= lo) & (y <= hi))[0]
            pts += idx.size
            configs = np.stack(np.unravel_index(idx, size.dims), axis=1)
            hits += has_pair_with_mark(configs, target)
        out.append(ProbeResult(int(N), hits, int(replicas), pts / replicas))
    return out


def cascade_probe(samples, chain: Chain, window, target: int) -> float:
    """Fraction of cascade samples with a window pair whose tree mark is ``target``."""
    lo, hi = window
    hits = 0
    for smp in samples:
        keep = np.nonzero((smp.y >= lo) & (smp.y <= hi))[0]
        sub = CascadeSample(smp.cspec, smp.index[keep], smp.u[keep], smp.seed)
        pairs = tree_pairs(sub, chain, np.ones(keep.size))
        hits += bool(np.any(pairs.marks == target))
    return hits / len(samples) if samples else 0.0


# -- moments --------------------------------------------------------------------------------

def power_sums(weight_lists, k: int) -> np.ndarray:
    return np.array([float(np.sum(np.asarray(w, float) ** k)) for w in weight_lists])


def moment_check(weights_empirical, weights_oracle, orders=(2, 3), z_crit: float = Z_CRIT,
                 name: str = "moment_check", seeds=None) -> ComparisonReport:
    """``E sum w^k`` of two replica collections, compared order by order.

    The joint SE combines both collections' replica standard errors; the
    report passes when every order lies within ``z_crit`` of them. The
    headline numbers are those of the worst order.
    """
    per = {}
    for k in orders:
        e = power_sums(weights_empirical, k)
        o = power_sums(weights_oracle, k)
        se = math.sqrt((e.var(ddof=1) / e.size if e.size > 1 else 0.0)
                       + (o.var(ddof=1) / o.size if o.size > 1 else 0.0))
        diff = float(e.mean() - o.mean())
        z = diff / se if se > 0 else (0.0 if diff == 0 else math.copysign(math.inf, diff))
        per[int(k)] = {"empirical": float(e.mean()), "oracle": float(o.mean()), "se": se, "z": z}
    worst = max(per, key=lambda k: abs(per[k]["z"]))
    w = per[worst]
    passed = all(abs(v["z"]) < z_crit for v in per.values())
    return ComparisonReport(name, w["empirical"], w["oracle"], w["se"], w["z"], passed,
                            len(weights_empirical), dict(seeds or {}),
                            {"orders": {str(k): v for k, v in per.items()}, "worst_order": worst,
                             "oracle_replicas": len(weights_oracle)})


def strictly_decreasing(values) -> bool:
    return all(b < a for a, b in zip(values, values[1:]))
