"""Utility primitives, the Beta preference prior and rank partitions.

Alternatives are deductible levels ordered from lowest to highest; most
functions refer to them by position (0-based index) in a ``FeasibleSet``.
Prices are stored as integer cents and converted to dollars only when
utilities are evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import special, stats

TAYLOR_THRESHOLD = 1e-8
SCAN_POINTS = 1024
ROOT_TOL = 1e-12
MERGE_TOL = 1e-13
TIE_TOL = 1e-14
_EXP_LIMIT = 709.0


class DomainError(ArithmeticError):
    """Raised when a utility evaluation would overflow."""


class ModelViolationError(RuntimeError):
    """Raised when a pairwise utility difference crosses zero more than once."""


class DegenerateCellError(ValueError):
    """Raised when a covariate cell produces exact utility ties."""


# ---------------------------------------------------------------------------
# Feasible sets and covariate cells
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeasibleSet:
    """Ordered menu of deductible levels (dollars, strictly increasing)."""

    alternatives: tuple[float, ...]
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        alts = tuple(float(a) for a in self.alternatives)
        if len(alts) < 2:
            raise ValueError("a feasible set needs at least two alternatives")
        if any(b <= a for a, b in zip(alts, alts[1:])):
            raise ValueError("alternatives must be strictly increasing")
        object.__setattr__(self, "alternatives", alts)
        labels = tuple(self.labels) or tuple(f"${a:g}" for a in alts)
        if len(labels) != len(alts):
            raise ValueError("one label per alternative is required")
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.alternatives)

    @property
    def amounts(self) -> NDArray[np.float64]:
        return np.asarray(self.alternatives, dtype=float)

    def index(self, amount: float) -> int:
        try:
            return self.alternatives.index(float(amount))
        except ValueError:
            raise KeyError(f"{amount!r} is not in the feasible set") from None

    @classmethod
    def evenly_spaced(cls, first: float, last: float, step: float) -> "FeasibleSet":
        count = int(round((last - first) / step)) + 1
        return cls(tuple(first + step * k for k in range(count)))


def linear_multipliers(feasible: FeasibleSet) -> NDArray[np.float64]:
    """Pricing multipliers g(c) = (c_max - c)/c_max + 1 used by the simulations."""
    c = feasible.amounts
    top = c[-1]
    return (top - c) / top + 1.0


def _round_half_up(x: ArrayLike) -> NDArray[np.int64]:
    return np.floor(np.asarray(x, dtype=float) + 0.5).astype(np.int64)


@dataclass(frozen=True)
class CovariateCell:
    """One (claim probability, price menu) configuration.

    ``price_cents`` holds the premium of every alternative in integer cents.
    When ``multipliers`` and ``base_price_cents`` are given the menu must agree
    with ``g(c) * base_price + zeta`` to within one cent.
    """

    feasible: FeasibleSet
    mu: float
    price_cents: tuple[int, ...]
    base_price_cents: int | None = None
    multipliers: tuple[float, ...] | None = None
    zeta_cents: int = 0

    def __post_init__(self):
        if not (0.0 <= self.mu < 1.0):
            raise ValueError(f"mu must lie in [0, 1), got {self.mu}")
        prices = tuple(int(p) for p in self.price_cents)
        if len(prices) != len(self.feasible):
            raise ValueError("price menu length differs from the feasible set")
        if min(prices) < 0:
            raise ValueError("prices must be nonnegative")
        object.__setattr__(self, "price_cents", prices)
        object.__setattr__(self, "mu", float(self.mu))
        if self.multipliers is not None:
            g = np.asarray(self.multipliers, dtype=float)
            if len(g) != len(prices):
                raise ValueError("one multiplier per alternative is required")
            if np.any(g <= 0) or np.any(np.diff(g) >= 0):
                raise ValueError("multipliers must be positive and strictly decreasing")
            if self.base_price_cents is not None:
                implied = g * self.base_price_cents + self.zeta_cents
                if np.max(np.abs(implied - np.asarray(prices))) > 1.0 + 1e-9:
                    raise ValueError("price menu inconsistent with the pricing rule")
            object.__setattr__(self, "multipliers", tuple(float(v) for v in g))

    @classmethod
    def from_rule(
        cls,
        feasible: FeasibleSet,
        mu: float,
        base_price_cents: int,
        multipliers: Sequence[float] | None = None,
        zeta_cents: int = 0,
    ) -> "CovariateCell":
        g = linear_multipliers(feasible) if multipliers is None else np.asarray(multipliers, float)
        prices = _round_half_up(g * base_price_cents + zeta_cents)
        return cls(feasible, mu, tuple(prices.tolist()), int(base_price_cents), tuple(g), int(zeta_cents))

    @classmethod
    def from_dollars(cls, feasible: FeasibleSet, mu: float, prices: Sequence[float]) -> "CovariateCell":
        return cls(feasible, mu, tuple(_round_half_up(np.asarray(prices) * 100).tolist()))

    @property
    def prices(self) -> NDArray[np.float64]:
        """Premiums in dollars."""
        return np.asarray(self.price_cents, dtype=float) / 100.0

    @property
    def key(self) -> tuple:
        return (self.mu, self.price_cents)


# ---------------------------------------------------------------------------
# Utility
# ---------------------------------------------------------------------------


def _scalar_or_array(out: NDArray, *inputs) -> float | NDArray:
    if all(np.ndim(v) == 0 for v in inputs):
        return float(out)
    return out


def cara_utility(nu: ArrayLike, y: ArrayLike) -> float | NDArray:
    """CARA utility ``(1 - exp(-nu*y))/nu`` with the linear limit at ``nu = 0``.

    A three-term Taylor expansion is used when ``|nu*y| < 1e-8``.
    """
    nu_a = np.asarray(nu, dtype=float)
    y_a = np.asarray(y, dtype=float)
    x = nu_a * y_a
    if np.any(~np.isfinite(x)) or np.any(-x > _EXP_LIMIT):
        raise DomainError("exp(-nu*y) overflows for the requested arguments")
    small = np.abs(x) < TAYLOR_THRESHOLD
    safe_nu = np.where(small, 1.0, nu_a)
    exact = -np.expm1(-x) / safe_nu
    series = y_a * (1.0 - x / 2.0 + x * x / 6.0)
    return _scalar_or_array(np.where(small, series, exact), nu, y)


def _eu_kernel(mu, price, amount, nu):
    """Expected utility for broadcastable arrays of (mu, price, deductible, nu)."""
    return (1.0 - mu) * cara_utility(nu, -price) + mu * cara_utility(nu, -(price + amount))


def expected_utilities(cell: CovariateCell, nu: ArrayLike) -> NDArray[np.float64]:
    """Expected utility of every alternative; shape ``np.shape(nu) + (|D|,)``."""
    nu_a = np.asarray(nu, dtype=float)[..., None]
    return np.asarray(_eu_kernel(cell.mu, cell.prices, cell.feasible.amounts, nu_a))


def expected_utility(alt: int, cell: CovariateCell, nu: ArrayLike) -> float | NDArray:
    """Expected utility of alternative ``alt`` (index) in ``cell`` at ``nu``."""
    out = _eu_kernel(cell.mu, cell.prices[alt], cell.feasible.amounts[alt], np.asarray(nu, float))
    return _scalar_or_array(np.asarray(out), nu)


def risk_premium(nu: float, loss: float, prob: float) -> float:
    """Certainty-equivalent payment minus expected loss for a binary loss lottery."""
    if loss <= 0 or not (0.0 < prob < 1.0):
        raise ValueError("loss must be positive and prob in (0, 1)")
    x = nu * loss
    if x > _EXP_LIMIT:
        raise DomainError("exp(nu*loss) overflows")
    if abs(x) < TAYLOR_THRESHOLD:
        return nu * loss * loss * prob * (1.0 - prob) / 2.0
    return float(np.log1p(prob * np.expm1(x)) / nu - prob * loss)


# ---------------------------------------------------------------------------
# Beta prior
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BetaSpec:
    """Beta distribution with shapes (gamma1, gamma2) rescaled to a support."""

    gamma1: float
    gamma2: float
    support_lo: float = 0.0
    support_hi: float = 0.03

    def __post_init__(self):
        for g in (self.gamma1, self.gamma2):
            if not (np.isfinite(g) and g > 0):
                raise ValueError(f"Beta shapes must be positive and finite, got {g}")
        if not self.support_hi > self.support_lo:
            raise ValueError("support_hi must exceed support_lo")

    @property
    def support(self) -> tuple[float, float]:
        return (self.support_lo, self.support_hi)

    @property
    def width(self) -> float:
        return self.support_hi - self.support_lo

    def _unit(self, nu):
        return np.clip((np.asarray(nu, dtype=float) - self.support_lo) / self.width, 0.0, 1.0)

    def cdf(self, nu: ArrayLike) -> NDArray:
        return special.betainc(self.gamma1, self.gamma2, self._unit(nu))

    def pdf(self, nu: ArrayLike) -> NDArray:
        return stats.beta.pdf(self._unit(nu), self.gamma1, self.gamma2) / self.width

    def masses(self, edges: ArrayLike) -> NDArray:
        """Probability of each interval between consecutive ``edges``."""
        return np.diff(self.cdf(edges))

    def moments(self) -> tuple[float, float]:
        return moments_from_beta(self)

    def sample(self, rng: np.random.Generator, size) -> NDArray:
        return self.support_lo + self.width * rng.beta(self.gamma1, self.gamma2, size)

    @classmethod
    def from_moments(cls, mean: float, variance: float, support=(0.0, 0.03)) -> "BetaSpec":
        return beta_from_moments(mean, variance, support)


def feasible_moments(mean, variance, support=(0.0, 0.03)) -> NDArray[np.bool_]:
    """True where (mean, variance) lies in the open Beta moment set."""
    lo, hi = support
    m = (np.asarray(mean, float) - lo) / (hi - lo)
    v = np.asarray(variance, float) / (hi - lo) ** 2
    return (m > 0) & (m < 1) & (v > 0) & (m * (1 - m) - v > 0)


def beta_from_moments(mean: float, variance: float, support=(0.0, 0.03)) -> BetaSpec:
    """Beta shapes matching a mean and variance on ``support``."""
    lo, hi = float(support[0]), float(support[1])
    if not feasible_moments(mean, variance, (lo, hi)):
        raise ValueError(f"moment pair ({mean}, {variance}) is outside the Beta moment set")
    return beta_from_fractions((mean - lo) / (hi - lo), variance / (hi - lo) ** 2, (lo, hi))


def beta_from_fractions(m: float, v: float, support=(0.0, 0.03)) -> BetaSpec:
    """Beta shapes from the mean as a fraction of the support and the variance
    as a fraction of its squared width (the lattice coordinates)."""
    m, v = float(m), float(v)
    if not (0 < m < 1 and v > 0 and m * (1 - m) - v > 0):
        raise ValueError(f"fractions ({m}, {v}) are outside the Beta moment set")
    common = m * (1 - m) / v - 1.0
    return BetaSpec(m * common, (1 - m) * common, float(support[0]), float(support[1]))


def moments_from_beta(beta: BetaSpec) -> tuple[float, float]:
    a, b = beta.gamma1, beta.gamma2
    m = a / (a + b)
    v = a * b / ((a + b) ** 2 * (a + b + 1))
    return beta.support_lo + beta.width * m, v * beta.width**2


@dataclass(frozen=True)
class ThetaPoint:
    """Candidate parameter: Beta prior plus optional choice-set-size masses."""

    beta: BetaSpec
    pi: Mapping[int, float] | None = None

    def __post_init__(self):
        if self.pi is not None:
            pi = {int(q): float(w) for q, w in self.pi.items()}
            if any(not (0.0 <= w <= 1.0) for w in pi.values()):
                raise ValueError("size masses must lie in [0, 1]")
            if abs(sum(pi.values()) - 1.0) > 1e-12:
                raise ValueError("size masses must sum to one")
            object.__setattr__(self, "pi", dict(sorted(pi.items())))


# ---------------------------------------------------------------------------
# Thresholds and rank partitions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Threshold:
    """Outcome of comparing two alternatives over the support.

    ``kind`` is ``"root"`` (``value`` holds the crossing; the lower-index
    alternative wins above it when it is the lower deductible),
    ``"always-a"`` or ``"always-b"``.
    """

    kind: str
    value: float | None = None


def _fill_zero_signs(s: NDArray) -> NDArray:
    """Replace exact zeros by the nearest preceding (else following) nonzero sign."""
    s = s.copy()
    cols = np.nonzero(np.any(s == 0, axis=0))[0]
    for j in cols:
        col = s[:, j]
        nz = np.nonzero(col)[0]
        if nz.size == 0:
            continue
        idx = np.maximum.accumulate(np.where(col != 0, np.arange(col.size), -1))
        idx[idx < 0] = nz[0]
        s[:, j] = col[idx]
    return s


def _pairwise_thresholds(cell: CovariateCell, support, pairs_a, pairs_b):
    """Vectorised threshold search for arrays of alternative pairs.

    Returns ``(kind, root)`` arrays where kind is 0 for a root, 1 for
    always-a and 2 for always-b.
    """
    lo, hi = support
    grid = np.linspace(lo, hi, SCAN_POINTS)
    u = expected_utilities(cell, grid)
    diff = u[:, pairs_a] - u[:, pairs_b]
    signs = _fill_zero_signs(np.sign(diff))
    all_zero = np.all(signs == 0, axis=0)
    if np.any(all_zero):
        raise DegenerateCellError("two alternatives tie over the whole support")
    changes = signs[1:] != signs[:-1]
    n_changes = changes.sum(axis=0)
    if np.any(n_changes > 1):
        j = int(np.argmax(n_changes > 1))
        raise ModelViolationError(
            f"utility difference of alternatives {pairs_a[j]} and {pairs_b[j]} changes sign "
            f"{int(n_changes[j])} times over the support"
        )
    kind = np.where(signs[0] > 0, 1, 2)
    root = np.full(len(pairs_a), np.nan)
    crossing = np.nonzero(n_changes == 1)[0]
    if crossing.size:
        k = np.argmax(changes[:, crossing], axis=0)
        a = grid[k].copy()
        b = grid[k + 1].copy()
        sa = signs[k, crossing]
        ia = pairs_a[crossing]
        ib = pairs_b[crossing]
        amounts = cell.feasible.amounts
        prices = cell.prices

        def f(nu):
            return _eu_kernel(cell.mu, prices[ia], amounts[ia], nu) - _eu_kernel(
                cell.mu, prices[ib], amounts[ib], nu
            )

        for _ in range(200):
            if np.max(b - a) <= ROOT_TOL:
                break
            mid = 0.5 * (a + b)
            fm = np.sign(f(mid))
            left = fm == sa
            exact = fm == 0
            a = np.where(left & ~exact, mid, a)
            b = np.where(~left & ~exact, mid, b)
            a = np.where(exact, mid, a)
            b = np.where(exact, mid, b)
        kind[crossing] = 0
        root[crossing] = 0.5 * (a + b)
    return kind, root


def indifference_threshold(alt_a: int, alt_b: int, cell: CovariateCell, support=(0.0, 0.03)) -> Threshold:
    """Where (if anywhere) in the support two alternatives swap ranks."""
    if alt_a == alt_b:
        raise ValueError("alternatives must differ")
    kind, root = _pairwise_thresholds(cell, support, np.array([alt_a]), np.array([alt_b]))
    if kind[0] == 0:
        return Threshold("root", float(root[0]))
    return Threshold("always-a" if kind[0] == 1 else "always-b")


@dataclass(frozen=True, eq=False)
class RankPartition:
    """Breakpoints of the support with the full utility ranking on each piece."""

    cell: CovariateCell
    support: tuple[float, float]
    breakpoints: NDArray[np.float64]
    rankings: NDArray[np.int64]
    positions: NDArray[np.int64] = field(init=False, repr=False)

    def __post_init__(self):
        pos = np.empty_like(self.rankings)
        rows = np.arange(self.rankings.shape[0])[:, None]
        pos[rows, self.rankings] = np.arange(self.rankings.shape[1])[None, :]
        for arr in (self.breakpoints, self.rankings, pos):
            arr.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    @property
    def n_alternatives(self) -> int:
        return self.rankings.shape[1]

    @property
    def n_intervals(self) -> int:
        return self.rankings.shape[0]

    @property
    def edges(self) -> NDArray[np.float64]:
        return np.concatenate([[self.support[0]], self.breakpoints, [self.support[1]]])

    @property
    def first_best(self) -> NDArray[np.int64]:
        return self.rankings[:, 0]

    def top_count(self, q: int) -> int:
        if not 1 <= q <= self.n_alternatives:
            raise ValueError(f"q must lie in [1, {self.n_alternatives}]")
        return self.n_alternatives - q + 1

    def d_star(self, q: int) -> NDArray[np.bool_]:
        """Membership matrix (intervals x alternatives) of the top |D|-q+1 set."""
        return self.positions < self.top_count(q)

    def interval_of(self, nu: ArrayLike) -> NDArray[np.int64]:
        return np.searchsorted(self.breakpoints, np.asarray(nu, float), side="right")

    def realizations(self, q: int) -> dict[frozenset, list[int]]:
        """Distinct realizations of the top set, each with its interval indices."""
        out: dict[frozenset, list[int]] = {}
        for i, row in enumerate(self.d_star(q)):
            out.setdefault(frozenset(np.nonzero(row)[0].tolist()), []).append(i)
        return out

    def is_adjacent(self, q: int) -> bool:
        """True when every realization of the top set is a run of neighbours."""
        for real in self.realizations(q):
            idx = sorted(real)
            if idx[-1] - idx[0] + 1 != len(idx):
                return False
        return True


def rank_partition(cell: CovariateCell, support=(0.0, 0.03)) -> RankPartition:
    """Split the support at all pairwise indifference points and rank each piece."""
    lo, hi = float(support[0]), float(support[1])
    if not hi > lo:
        raise ValueError("support must have positive length")
    n = len(cell.feasible)
    ia, ib = np.triu_indices(n, 1)
    kind, root = _pairwise_thresholds(cell, (lo, hi), ia, ib)
    roots = np.sort(root[(kind == 0) & (root > lo) & (root < hi)])
    if roots.size:
        keep = np.concatenate([[True], np.diff(roots) > MERGE_TOL])
        roots = roots[keep]
    edges = np.concatenate([[lo], roots, [hi]])
    mids = 0.5 * (edges[:-1] + edges[1:])
    u = expected_utilities(cell, mids)
    order = np.argsort(-u, axis=1, kind="stable")
    ranked = np.take_along_axis(u, order, axis=1)
    gaps = ranked[:, :-1] - ranked[:, 1:]
    scale = np.maximum(1.0, np.abs(ranked[:, :-1]))
    if np.any(gaps <= TIE_TOL * scale):
        raise DegenerateCellError("utility tie at an interval midpoint")
    if order.shape[0] > 1:
        changed = np.any(order[1:] != order[:-1], axis=1)
        roots = roots[changed]
        order = order[np.concatenate([[True], changed])]
    return RankPartition(cell, (lo, hi), roots.astype(float), order.astype(np.int64))


# ---------------------------------------------------------------------------
# Containment and realization probabilities
# ---------------------------------------------------------------------------


def _as_index_array(K: Iterable[int], n: int) -> NDArray[np.int64]:
    idx = np.unique(np.fromiter((int(k) for k in K), dtype=np.int64))
    if idx.size == 0:
        raise ValueError("test set must be nonempty")
    if idx[0] < 0 or idx[-1] >= n:
        raise ValueError("test set refers to unknown alternatives")
    return idx


def hits(partition: RankPartition, q: int, K: Iterable[int]) -> NDArray[np.bool_]:
    """Per interval: does the top set intersect ``K``?"""
    idx = _as_index_array(K, partition.n_alternatives)
    return partition.d_star(q)[:, idx].any(axis=1)


def containment_probability(partition: RankPartition, q: int, K: Iterable[int], beta: BetaSpec) -> float:
    """Probability that the top |D|-q+1 set intersects ``K`` under ``beta``."""
    _check_support(partition, beta)
    return float(beta.masses(partition.edges)[hits(partition, q, K)].sum())


def realization_probabilities(partition: RankPartition, q: int, beta: BetaSpec) -> dict[frozenset, float]:
    _check_support(partition, beta)
    mass = beta.masses(partition.edges)
    return {real: float(mass[idx].sum()) for real, idx in partition.realizations(q).items()}


def _check_support(partition: RankPartition, beta: BetaSpec):
    if not np.allclose(partition.support, beta.support, rtol=0, atol=1e-15):
        raise ValueError("partition and prior use different supports")
