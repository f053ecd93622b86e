"""Model-free and model-based checks for heterogeneous choice sets."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .core import CovariateCell, RankPartition, _round_half_up, beta_from_moments, rank_partition
from .data import Dataset
from .inference import InstrumentCells

ENVELOPE_POINTS = 101
BAND_SE = 3.0
_TOL = 1e-12


# ---------------------------------------------------------------------------
# Dominated alternatives
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DominanceVerdict:
    alternative: int
    dominated: bool
    dominating: frozenset = frozenset()


def dominated_alternatives(cell: CovariateCell | RankPartition, support=(0.0, 0.03)) -> list[DominanceVerdict]:
    """Flag alternatives that are never first best anywhere on the support.

    The check runs on the rank partition, so it is exact up to root-finding
    tolerance. ``dominating`` lists the alternatives that are first best
    somewhere, i.e. the ones that beat a dominated alternative.
    """
    part = cell if isinstance(cell, RankPartition) else rank_partition(cell, support)
    best = frozenset(int(a) for a in np.unique(part.first_best))
    return [
        DominanceVerdict(a, a not in best, best if a not in best else frozenset())
        for a in range(part.n_alternatives)
    ]


def optimality_region(partition: RankPartition, K) -> list[tuple[float, float]]:
    """Disjoint intervals of nu on which the first-best alternative lies in K."""
    K = set(int(a) for a in K)
    edges = partition.edges
    out: list[list[float]] = []
    for i, a in enumerate(partition.first_best):
        if int(a) not in K:
            continue
        if out and abs(out[-1][1] - edges[i]) <= _TOL:
            out[-1][1] = float(edges[i + 1])
        else:
            out.append([float(edges[i]), float(edges[i + 1])])
    return [tuple(x) for x in out]


def _measure(intervals) -> float:
    return float(sum(b - a for a, b in intervals))


def _difference(a, b) -> float:
    """Lebesgue measure of (union a) minus (union b)."""
    total = 0.0
    for lo, hi in a:
        cut = hi - lo
        for l2, h2 in b:
            cut -= max(0.0, min(hi, h2) - max(lo, l2))
        total += max(cut, 0.0)
    return total


def strictly_inside(a, b) -> bool:
    """Is region a a strict subset of region b (up to measure zero)?"""
    return _difference(a, b) <= _TOL and _difference(b, a) > _TOL


# ---------------------------------------------------------------------------
# Law of demand
# ---------------------------------------------------------------------------


@dataclass
class LawOfDemandResult:
    """Counts for the price/risk comparison (``price_risk``) and the optimality-region one (``region``).

    ``*_violations`` counts any reversal of the sample frequencies;
    ``*_significant`` only those outside the noise band. With
    ``band_rule="separate"`` each frequency gets its own +-``band`` SE band
    and a reversal counts when the bands do not overlap; with
    ``"difference"`` the gap must exceed ``band`` SEs of the difference.
    """

    price_risk_comparisons: int = 0
    price_risk_violations: int = 0
    price_risk_significant: int = 0
    region_comparisons: int = 0
    region_violations: int = 0
    region_significant: int = 0
    band: float = BAND_SE
    band_rule: str = "separate"
    details: list = field(default_factory=list)

    def summary(self) -> dict[str, str]:
        def fmt(v, c):
            pct = 100.0 * v / c if c else 0.0
            return f"{v} violations ({pct:.0f} percent)"

        return {
            "price_risk": fmt(self.price_risk_violations, self.price_risk_comparisons),
            "region": fmt(self.region_violations, self.region_comparisons),
        }


@dataclass(frozen=True)
class CubeSummary:
    """Cube-level covariate averages, choice frequencies and sizes."""

    mu: NDArray
    base_price: NDArray
    cells: tuple[CovariateCell, ...]
    freq: NDArray
    size: NDArray


def cube_summary(dataset: Dataset, cubes: InstrumentCells) -> CubeSummary:
    """Averages per cube; the all-data box (last column) is left out."""
    member = cubes.membership[:, :-1] if cubes.membership.shape[1] > 1 else cubes.membership
    keep = member.sum(axis=0) > 0
    member = member[:, keep]
    size = member.sum(axis=0).astype(float)
    w = member / size
    mu = w.T @ dataset.mu
    base = w.T @ (dataset.base_price_cents / 100.0)
    menus = _round_half_up(w.T @ dataset.price_cents)
    onehot = np.zeros((len(dataset), dataset.n_alternatives))
    onehot[np.arange(len(dataset)), dataset.choice] = 1.0
    freq = w.T @ onehot
    cells = tuple(CovariateCell(dataset.feasible, float(m), tuple(p.tolist())) for m, p in zip(mu, menus))
    return CubeSummary(mu, base, cells, freq, size)


def _se1(p, n):
    """Agresti-Coull standard error of a frequency; stays positive at 0 and 1."""
    x = min(max(p, 0.0), 1.0) * n
    pt = (x + 2.0) / (n + 4.0)
    return math.sqrt(pt * (1 - pt) / (n + 4.0))


def _less(a: float, b: float) -> bool:
    # strict comparison of cube averages; float-level ties count as ties
    return a < b - 1e-9 * max(1.0, abs(a), abs(b))


def runs(n_alternatives: int, max_size: int = 3) -> list[frozenset]:
    """Adjacent runs of sizes 1..max_size."""
    return [
        frozenset(range(a, a + s))
        for s in range(1, max_size + 1)
        for a in range(n_alternatives - s + 1)
    ]


def law_of_demand_check(
    dataset: Dataset,
    cubes: InstrumentCells,
    support=(0.0, 0.03),
    band: float = BAND_SE,
    max_run: int = 3,
    keep_details: int = 1000,
    band_rule: str = "separate",
) -> LawOfDemandResult:
    """Count frequency reversals that full choice sets cannot produce.

    Price/risk comparison: for cubes with lower average mu and higher average
    base price, every suffix set of high deductibles must be chosen at least
    as often. Optimality-region comparison: if the nu-region where K is
    optimal at x is strictly inside the region where K' is optimal at x',
    then K at x cannot be chosen more often than K' at x'. Comparisons where
    a set holds an alternative dominated at either cube are skipped.
    """
    cs = cube_summary(dataset, cubes)
    n_alt = dataset.n_alternatives
    parts = [rank_partition(c, support) for c in cs.cells]
    dominated = [
        {v.alternative for v in dominated_alternatives(p) if v.dominated} for p in parts
    ]
    if band_rule not in ("separate", "difference"):
        raise ValueError(f"unknown band rule {band_rule!r}")
    out = LawOfDemandResult(band=band, band_rule=band_rule)

    def record(kind, pa, na, pb, nb, info):
        # pa should not exceed pb
        diff = pa - pb
        if diff <= 0:
            return
        sa, sb = _se1(pa, na), _se1(pb, nb)
        if band_rule == "separate":
            sig = pa - band * sa > pb + band * sb
        else:
            sig = diff > band * math.hypot(sa, sb)
        se = math.hypot(sa, sb)
        if kind == "price_risk":
            out.price_risk_violations += 1
            out.price_risk_significant += int(sig)
        else:
            out.region_violations += 1
            out.region_significant += int(sig)
        if len(out.details) < keep_details:
            out.details.append(dict(kind=kind, excess=float(diff), se=float(se), significant=bool(sig), **info))

    # price/risk: the higher-mu cheaper cube must not choose high deductibles more often
    suffixes = [frozenset(range(n_alt - s, n_alt)) for s in range(1, n_alt)]
    J = len(cs.cells)
    for j in range(J):
        for k in range(J):
            if not (_less(cs.mu[j], cs.mu[k]) and _less(cs.base_price[k], cs.base_price[j])):
                continue
            for K in suffixes:
                if K & (dominated[j] | dominated[k]):
                    continue
                idx = sorted(K)
                pj, pk = cs.freq[j, idx].sum(), cs.freq[k, idx].sum()
                out.price_risk_comparisons += 1
                record("price_risk", pk, cs.size[k], pj, cs.size[j], dict(low=j, high=k, K=idx))

    # optimality regions
    items = []
    for j, part in enumerate(parts):
        for K in runs(n_alt, max_run):
            if K & dominated[j]:
                continue
            region = optimality_region(part, K)
            if region:
                items.append((j, K, region, float(cs.freq[j, sorted(K)].sum())))
    single = np.array([len(r) == 1 for _, _, r, _ in items])
    lo = np.array([r[0][0] for _, _, r, _ in items])
    hi = np.array([r[-1][1] for _, _, r, _ in items])
    size = np.array([cs.size[j] for j, *_ in items])
    for a, (j, K, ra, pa) in enumerate(items):
        # candidate partners: single intervals containing a's hull, plus any multi-interval item
        inside = (lo <= lo[a] + _TOL) & (hi >= hi[a] - _TOL)
        strict = inside & ((lo < lo[a] - _TOL) | (hi > hi[a] + _TOL))
        cand = np.nonzero((strict & single & single[a]) | ~single | (~single[a] & inside))[0]
        for b in cand:
            jb, Kb, rb, pb = items[b]
            if jb == j:
                continue
            if not (single[a] and single[b]) and not strictly_inside(ra, rb):
                continue
            out.region_comparisons += 1
            record("region", pa, size[a], pb, size[b], dict(inner=(j, sorted(K)), outer=(jb, sorted(Kb))))
    return out


# ---------------------------------------------------------------------------
# Rationalizability
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RationalizabilityResult:
    kept: NDArray[np.bool_]

    @property
    def share(self) -> float:
        return float(self.kept.mean()) if self.kept.size else 1.0

    @property
    def excluded(self) -> NDArray[np.int64]:
        return np.nonzero(~self.kept)[0]


def rationalizability_filter(dataset: Dataset, support=(0.0, 0.03), kappa: int = 3) -> RationalizabilityResult:
    """Keep records whose choice is among the top |D|-kappa+1 for some nu in the support."""
    ci = dataset.cell_index()
    ok = np.zeros((len(ci), dataset.n_alternatives), dtype=bool)
    for c, cell in enumerate(ci.cells):
        ok[c] = rank_partition(cell, support).d_star(kappa).any(axis=0)
    return RationalizabilityResult(ok[ci.index, dataset.choice])


# ---------------------------------------------------------------------------
# Rank order property
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RankOrderVerdict:
    applicable: bool
    passed: bool | None
    margin: float | None
    se: float | None = None

    @property
    def failed(self) -> bool:
        return self.applicable and self.passed is False


def dominance_certificate(partition: RankPartition, a: int, b: int, c: int) -> bool:
    """True if on every interval a or b ranks above c."""
    pos = partition.positions
    return bool(np.all(pos[:, c] > np.minimum(pos[:, a], pos[:, b])))


def rank_order_test(
    probs: ArrayLike,
    triple: tuple[int, int, int],
    partition: RankPartition,
    n: int | None = None,
    band: float = BAND_SE,
) -> RankOrderVerdict:
    """Check Pr(a) + Pr(b) > Pr(c) when c is everywhere beaten by a or b.

    With ``n`` (the cell's sample size) the probabilities are treated as
    frequencies: the test fails only if Pr(c) exceeds Pr(a) + Pr(b) by more
    than ``band`` standard errors.
    """
    a, b, c = triple
    if not dominance_certificate(partition, a, b, c):
        return RankOrderVerdict(False, None, None)
    p = np.asarray(probs, dtype=float)
    margin = float(p[a] + p[b] - p[c])
    if n is None:
        return RankOrderVerdict(True, margin > 0, margin)
    # variance of the multinomial contrast 1{a}+1{b}-1{c}
    s = p[a] + p[b] + p[c]
    se = math.sqrt(max(s - margin**2, 0.0) / n)
    return RankOrderVerdict(True, not (margin < -band * se), margin, se)


# ---------------------------------------------------------------------------
# Density envelope
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DensityEnvelope:
    """Pointwise bounds on the densities of accepted parameters (an outer region)."""

    nu: NDArray[np.float64]
    lower: NDArray[np.float64]
    upper: NDArray[np.float64]

    def contains(self, density: ArrayLike, rtol: float = 1e-9) -> bool:
        d = np.asarray(density, dtype=float)
        return bool(np.all(d >= self.lower * (1 - rtol)) and np.all(d <= self.upper * (1 + rtol)))

    def rows(self) -> list[dict]:
        return [{"nu": float(x), "lower": float(l), "upper": float(u)} for x, l, u in zip(self.nu, self.lower, self.upper)]


def density_envelope(
    means: ArrayLike,
    variances: ArrayLike,
    support=(0.0, 0.03),
    points: int = ENVELOPE_POINTS,
) -> DensityEnvelope:
    """Min and max Beta density over accepted (E, Var) nodes on an even nu grid."""
    means = np.atleast_1d(np.asarray(means, float))
    variances = np.atleast_1d(np.asarray(variances, float))
    if means.size == 0:
        raise ValueError("no accepted parameter values")
    nu = np.linspace(support[0], support[1], points)
    dens = np.stack([beta_from_moments(m, v, support).pdf(nu) for m, v in zip(means, variances)])
    return DensityEnvelope(nu, dens.min(axis=0), dens.max(axis=0))


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass
class DiagnosticsReport:
    dominated: dict
    law_of_demand: dict
    rationalizable_share: float
    notes: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    def to_text(self) -> str:
        lines = ["Dominated alternatives:"]
        for alt, info in self.dominated.items():
            lines.append(
                f"  {alt}: dominated in {info['cells']} cells, chosen there by {info['share']:.4f} of records"
            )
        lod = self.law_of_demand
        lines.append(f"Law of demand (price/risk): {lod['summary']['price_risk']}, {lod['price_risk_significant']} beyond band")
        lines.append(f"Law of demand (regions): {lod['summary']['region']}, {lod['region_significant']} beyond band")
        lines.append(f"Rationalizable share: {self.rationalizable_share:.4f}")
        lines += [f"Note: {n}" for n in self.notes]
        return "\n".join(lines) + "\n"


def diagnose(
    dataset: Dataset,
    cubes: InstrumentCells,
    support=(0.0, 0.03),
    kappa: int = 3,
    band: float = BAND_SE,
    band_rule: str = "separate",
) -> DiagnosticsReport:
    """Run the dominance, law-of-demand and rationalizability checks together."""
    ci = dataset.cell_index()
    labels = [f"{a:g}" for a in dataset.feasible.amounts]
    dom = np.zeros((len(ci), dataset.n_alternatives), dtype=bool)
    beaters: list[set] = [set() for _ in labels]
    for c, cell in enumerate(ci.cells):
        for v in dominated_alternatives(cell, support):
            if v.dominated:
                dom[c, v.alternative] = True
                beaters[v.alternative] |= set(v.dominating)
    chose_dominated = dom[ci.index, dataset.choice]
    dominated = {}
    for a, lab in enumerate(labels):
        mask = dataset.choice == a
        dominated[lab] = {
            "cells": int(dom[:, a].sum()),
            "dominating": [labels[b] for b in sorted(beaters[a])],
            "share": float((mask & chose_dominated).mean()) if len(dataset) else 0.0,
        }
    lod = law_of_demand_check(dataset, cubes, support, band, band_rule=band_rule)
    lod_dict = {k: v for k, v in asdict(lod).items() if k != "details"}
    lod_dict["summary"] = lod.summary()
    rat = rationalizability_filter(dataset, support, kappa)
    notes = [f"{int((~rat.kept).sum())} records cannot be rationalized at kappa = {kappa}"]
    return DiagnosticsReport(dominated, lod_dict, rat.share, notes)
