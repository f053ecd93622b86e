"""Test-set collections, moment inequalities and membership in the identified set."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import optimize

from .core import (
    _EXP_LIMIT,
    BetaSpec,
    CovariateCell,
    RankPartition,
    ThetaPoint,
    beta_from_fractions,
    realization_probabilities,
)
from .grid import MomentGrid
from .mixed_logit import _ce_kernel

MEMBERSHIP_TOL = 1e-12
CONVEX_TOL = 1e-9
FULL_INIT_MAX_ALTERNATIVES = 14
FIRST_BEST_SCAN = 20_000


# ---------------------------------------------------------------------------
# Test sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TestSetCollection:
    """Subsets of the feasible set (by alternative index) indexing inequalities."""

    __test__ = False

    sets: tuple[frozenset, ...]
    n_alternatives: int
    target: str = "gamma"
    provenance: tuple[str, ...] = ()

    def __post_init__(self):
        sets = tuple(frozenset(int(a) for a in K) for K in self.sets)
        full = frozenset(range(self.n_alternatives))
        if len(set(sets)) != len(sets):
            raise ValueError("duplicate test sets")
        for K in sets:
            if not K or K == full or max(K) >= self.n_alternatives or min(K) < 0:
                raise ValueError(f"test set {sorted(K)} is empty, improper or out of range")
        object.__setattr__(self, "sets", sets)
        prov = tuple(self.provenance) or ("given",) * len(sets)
        if len(prov) != len(sets):
            raise ValueError("one provenance entry per test set")
        object.__setattr__(self, "provenance", prov)

    def __len__(self) -> int:
        return len(self.sets)

    def __iter__(self):
        return iter(self.sets)

    def indicator(self) -> NDArray[np.float64]:
        """Matrix (alternatives x sets) with 1 where the alternative is in the set."""
        out = np.zeros((self.n_alternatives, len(self.sets)))
        for k, K in enumerate(self.sets):
            out[list(K), k] = 1.0
        return out

    def labelled(self, labels: Sequence[str]) -> list[tuple[str, ...]]:
        return [tuple(labels[a] for a in sorted(K)) for K in self.sets]


def _sort_key(K: frozenset):
    return (len(K), sorted(K))


def small_sets(n_alternatives: int, kappa: int) -> list[frozenset]:
    """All nonempty K with |K| < kappa."""
    return [frozenset(c) for r in range(1, kappa) for c in itertools.combinations(range(n_alternatives), r)]


def proper_subsets(n_alternatives: int) -> list[frozenset]:
    return [frozenset(c) for r in range(1, n_alternatives) for c in itertools.combinations(range(n_alternatives), r)]


def prefix_suffix_sets(n_alternatives: int, kappa: int) -> list[frozenset]:
    """The 2(kappa-1) leading and trailing runs used when realizations are adjacent."""
    n = n_alternatives
    pre = [frozenset(range(k)) for k in range(1, kappa)]
    suf = [frozenset(range(n - k, n)) for k in range(1, kappa)]
    return list(dict.fromkeys(pre + suf))


def interval_sets(n_alternatives: int) -> list[frozenset]:
    """Runs of neighbours and their complements (all proper and nonempty)."""
    n = n_alternatives
    runs = [frozenset(range(a, b)) for a in range(n) for b in range(a + 1, n + 1)]
    full = frozenset(range(n))
    out = [K for K in runs if K != full]
    out += [full - K for K in runs if K != full]
    return list(dict.fromkeys(out))


def _always_hit(M: NDArray[np.bool_], K: frozenset) -> bool:
    return bool(M[:, sorted(K)].any(axis=1).all())


def _co_occur(M: NDArray[np.bool_], c: int, rest: Iterable[int]) -> bool:
    return bool((M[:, c] & M[:, sorted(rest)].any(axis=1)).any())


def _theorem_steps(M_hit: NDArray[np.bool_], init: list[frozenset], M_pair: NDArray[np.bool_] | None = None) -> dict:
    """Drop always-intersected sets, then unions of pieces that never co-occur.

    ``M_hit`` is the (interval x alternative) membership matrix used for the
    always-intersected rule and ``M_pair`` (default ``M_hit``) the one used
    for the co-occurrence rule. Sizes are processed in increasing order, each
    against the collection left by the previous size. Returns the retained
    sets mapped to the rule that kept them.
    """
    M_pair = M_hit if M_pair is None else M_pair
    coll = [K for K in init if not _always_hit(M_hit, K)]
    top = max((len(K) for K in coll), default=0)
    for size in range(2, top + 1):
        snapshot = set(coll)
        kept = []
        for K in coll:
            if len(K) == size and any(
                frozenset([c]) in snapshot and (K - {c}) in snapshot and not _co_occur(M_pair, c, K - {c})
                for c in sorted(K)
            ):
                continue
            kept.append(K)
        coll = kept
    return {K: "retained" for K in coll}


def _corollary_pi5(M3: NDArray[np.bool_]) -> dict:
    coll = proper_subsets(5)
    never = {frozenset(p) for p in itertools.combinations(range(5), 2) if not _co_occur(M3, p[0], [p[1]])}
    coll = [K for K in coll if K not in never]
    coll = [K for K in coll if len(K) != 3]
    return {K: "pi5-corollary" for K in coll}


def _corollary_pi4(M3: NDArray[np.bool_], M4: NDArray[np.bool_]) -> dict:
    full = frozenset(range(5))
    coll = proper_subsets(5)
    never = {frozenset(p) for p in itertools.combinations(range(5), 2) if not _co_occur(M3, p[0], [p[1]])}
    coll = [K for K in coll if K not in never and (full - K) not in never]
    after1 = set(coll)

    def drop_triple(K):
        if len(K) != 3:
            return False
        for pair in itertools.combinations(sorted(K), 2):
            (l,) = K - set(pair)
            if frozenset(pair) in after1 and not _co_occur(M3, l, pair):
                return True
        return False

    coll = [K for K in coll if not drop_triple(K)]
    coll = [K for K in coll if not _always_hit(M4, K)]
    return {K: "pi4-corollary" for K in coll}


def first_best_somewhere(cell: CovariateCell, points: int = FIRST_BEST_SCAN) -> bool:
    """True if every alternative is the best choice for some real ``nu``.

    Certainty equivalents are scanned on a two-sided geometric grid that runs
    from risk loving to the largest overflow-safe risk aversion. CE is used
    instead of expected utility because EU flattens to 1/nu for strongly
    risk-loving agents.
    """
    amounts = cell.feasible.amounts.astype(float)
    hi = 0.99 * _EXP_LIMIT / amounts.max()
    mags = np.geomspace(1e-9, hi, points)
    nus = np.concatenate([-mags[::-1], [0.0], mags])[:, None]
    ce = _ce_kernel(cell.mu, cell.prices[None, :], amounts[None, :], nus)
    return np.unique(np.argmax(ce, axis=1)).size == amounts.size


def runs_shortcut_applies(partition: RankPartition, q: int) -> bool:
    """Every alternative is first best for some real nu and all top sets are runs.

    Only then are the leading/trailing runs used as the starting family;
    a cell with an alternative that is never first best falls back to the
    general initialization even if its realizations happen to be runs.
    """
    return partition.is_adjacent(q) and first_best_somewhere(partition.cell)


def generate_test_sets(
    partitions: Sequence[RankPartition],
    kappa: int,
    target: str = "gamma",
    q: int | None = None,
) -> TestSetCollection:
    """Sufficient test sets for a family of covariate cells.

    ``target="gamma"`` gives the sets for the preference parameters (top set
    of size |D|-kappa+1). When ``runs_shortcut_applies`` the leading and
    trailing runs seed the elimination. Runs without that condition start
    from runs and their complements; otherwise all sets with fewer than
    ``kappa`` elements do.
    ``target="pi"`` gives the sets for bounding the mass on size ``q > kappa``
    when only sizes kappa and q carry mass. ``target="kappa-one"`` uses the
    sets of the kappa = 2 problem. A set is kept if any cell keeps it.
    """
    if not partitions:
        raise ValueError("at least one rank partition is required")
    n = partitions[0].n_alternatives
    if any(p.n_alternatives != n for p in partitions):
        raise ValueError("all partitions must share the feasible set")
    if target == "kappa-one":
        coll = generate_test_sets(partitions, 2, "gamma")
        return TestSetCollection(coll.sets, n, "kappa-one", coll.provenance)
    if not 2 <= kappa <= n:
        raise ValueError(f"kappa must lie in [2, {n}]")
    retained: dict[frozenset, str] = {}
    for part in partitions:
        if target == "gamma":
            M = part.d_star(kappa)
            if runs_shortcut_applies(part, kappa):
                found = _theorem_steps(M, prefix_suffix_sets(n, kappa))
                found = {K: "adjacent-runs" for K in found}
            elif part.is_adjacent(kappa):
                # connected realizations: complements of runs are enough
                found = _theorem_steps(M, interval_sets(n))
            else:
                found = _theorem_steps(M, small_sets(n, kappa))
        elif target == "pi":
            if q is None or not kappa < q <= n:
                raise ValueError("pi target needs kappa < q <= |D|")
            Mk, Mq = part.d_star(kappa), part.d_star(q)
            if n == 5 and kappa == 3 and q == 5:
                found = _corollary_pi5(Mk)
            elif n == 5 and kappa == 3 and q == 4:
                found = _corollary_pi4(Mk, Mq)
            elif part.is_adjacent(kappa) and part.is_adjacent(q):
                # mixtures of connected top sets stay connected
                found = {K: "runs-and-complements" for K in interval_sets(n) if not _always_hit(Mq, K)}
            elif n <= FULL_INIT_MAX_ALTERNATIVES:
                found = _theorem_steps(Mq, proper_subsets(n), Mk)
            else:
                raise ValueError("non-adjacent realizations with more than 14 alternatives")
        else:
            raise ValueError(f"unknown target {target!r}")
        for K, why in found.items():
            retained.setdefault(K, why)
    keys = sorted(retained, key=_sort_key)
    label = target if target != "pi" else f"pi{q}"
    return TestSetCollection(tuple(keys), n, label, tuple(retained[K] for K in keys))


def full_support_test_sets(n_alternatives: int, kappa: int) -> TestSetCollection:
    """All |K| < kappa; the family when no elimination applies (e.g. mixed logit)."""
    sets = small_sets(n_alternatives, kappa)
    return TestSetCollection(tuple(sets), n_alternatives, "gamma", ("no-elimination",) * len(sets))


# ---------------------------------------------------------------------------
# Containment evaluation for many cells at once
# ---------------------------------------------------------------------------


class PartitionModel:
    """Containment probabilities for every (cell, test set) pair.

    The rank partitions do not depend on the prior, so hit patterns are
    precomputed once; each evaluation only needs the Beta CDF at the
    breakpoints of all cells.
    """

    def __init__(self, partitions: Sequence[RankPartition], test_sets: TestSetCollection, sizes: Iterable[int]):
        self.partitions = tuple(partitions)
        self.test_sets = test_sets
        self.sizes = tuple(sorted(set(int(q) for q in sizes)))
        self.support = self.partitions[0].support
        edges = [p.edges for p in self.partitions]
        self._edges = np.concatenate(edges)
        bounds = np.cumsum([0] + [len(e) for e in edges])
        # positions of each interval's left edge; skip block boundaries
        self._left = np.concatenate([np.arange(b, b + len(e) - 1) for b, e in zip(bounds[:-1], edges)])
        counts = [p.n_intervals for p in self.partitions]
        self._starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
        ind = test_sets.indicator()
        self._hits = {}
        for q in self.sizes:
            D = np.concatenate([p.d_star(q) for p in self.partitions]).astype(float)
            self._hits[q] = (D @ ind > 0).astype(float)

    @property
    def n_cells(self) -> int:
        return len(self.partitions)

    def masses(self, beta: BetaSpec) -> NDArray:
        cdf = beta.cdf(self._edges)
        return cdf[self._left + 1] - cdf[self._left]

    def containment(self, beta: BetaSpec, q: int) -> NDArray:
        """Array (cells x test sets) of P(top set of size |D|-q+1 meets K)."""
        mass = self.masses(beta)
        return np.add.reduceat(mass[:, None] * self._hits[q], self._starts, axis=0)

    def rhs(self, theta: ThetaPoint | BetaSpec, kappa: int) -> NDArray:
        beta, pi = _split_theta(theta)
        if pi is None:
            return self.containment(beta, kappa)
        mass = self.masses(beta)
        H = sum(w * self._hits[q] for q, w in pi.items() if w != 0.0)
        return np.add.reduceat(mass[:, None] * H, self._starts, axis=0)


def _split_theta(theta):
    if isinstance(theta, BetaSpec):
        return theta, None
    return theta.beta, theta.pi


# ---------------------------------------------------------------------------
# Inequalities and membership
# ---------------------------------------------------------------------------


def evaluate_inequality(
    theta: ThetaPoint | BetaSpec,
    K: Iterable[int],
    partition: RankPartition,
    lhs: float | None,
    kappa: int,
    with_pi: bool = False,
) -> float:
    """Slack RHS - LHS for one test set in one cell (nonnegative means satisfied)."""
    if lhs is None:
        raise ValueError("empirical probability for the cell is missing")
    ts = TestSetCollection((frozenset(K),), partition.n_alternatives)
    beta, pi = _split_theta(theta)
    if with_pi:
        if pi is None:
            raise ValueError("with_pi requires size masses on theta")
        model = PartitionModel([partition], ts, pi.keys())
        rhs = model.rhs(theta, kappa)
    else:
        rhs = PartitionModel([partition], ts, [kappa]).containment(beta, kappa)
    return float(rhs[0, 0] - lhs)


def kappa_one_variant(
    beta: BetaSpec, K: Iterable[int], partition: RankPartition, lhs: float, pi_bar_1: float
) -> float:
    """Slack when singleton choice sets carry at most ``pi_bar_1`` mass."""
    if not 0.0 <= pi_bar_1 < 1.0:
        raise ValueError("pi_bar_1 must lie in [0, 1)")
    ts = TestSetCollection((frozenset(K),), partition.n_alternatives)
    p2 = PartitionModel([partition], ts, [2]).containment(beta, 2)[0, 0]
    return float(pi_bar_1 + (1.0 - pi_bar_1) * p2 - lhs)


@dataclass(frozen=True, eq=False)
class InequalitySystem:
    """Moment inequalities for a set of cells with known choice probabilities."""

    partitions: tuple[RankPartition, ...]
    choice_probs: NDArray[np.float64]
    test_sets: TestSetCollection
    kappa: int
    sizes: tuple[int, ...] = ()
    model: PartitionModel = field(init=False, repr=False)

    def __post_init__(self):
        P = np.asarray(self.choice_probs, dtype=float)
        if P.ndim == 1:
            P = P[None, :]
        if P.shape != (len(self.partitions), self.test_sets.n_alternatives):
            raise ValueError("choice probabilities must be (cells x alternatives)")
        if np.any(P < -1e-15) or np.any(np.abs(P.sum(axis=1) - 1) > 1e-9):
            raise ValueError("each cell needs a probability vector")
        P.setflags(write=False)
        object.__setattr__(self, "choice_probs", P)
        sizes = tuple(sorted(set(self.sizes) | {self.kappa}))
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "model", PartitionModel(self.partitions, self.test_sets, sizes))

    @property
    def lhs(self) -> NDArray:
        return self.choice_probs @ self.test_sets.indicator()

    def slacks(self, theta: ThetaPoint | BetaSpec) -> NDArray:
        return self.model.rhs(theta, self.kappa) - self.lhs


@dataclass(frozen=True)
class Membership:
    inside: bool
    min_slack: float
    cell: int
    test_set: frozenset


def membership_enumerate(theta: ThetaPoint | BetaSpec, system: InequalitySystem) -> Membership:
    """Check every inequality; inside iff the smallest slack is >= -1e-12."""
    s = system.slacks(theta)
    c, k = np.unravel_index(int(np.argmin(s)), s.shape)
    lo = float(s[c, k])
    return Membership(lo >= -MEMBERSHIP_TOL, lo, int(c), system.test_sets.sets[k])


@dataclass(frozen=True)
class ConvexMembership:
    inside: bool
    objective: float
    direction: NDArray
    grad_norm: float
    iterations: int


def convex_objective(u: NDArray, p: NDArray, realizations: Sequence[tuple[NDArray, float]]) -> tuple[float, NDArray]:
    """Objective value and a supergradient at ``u``.

    ``realizations`` lists (member indices, probability) of the top set.
    """
    value = float(u @ p)
    grad = p.astype(float).copy()
    for members, prob in realizations:
        best = members[int(np.argmax(u[members]))]
        value -= prob * u[best]
        grad[best] -= prob
    return value, grad


def _level_set_values(u: NDArray, p: NDArray, realizations) -> tuple[float, NDArray]:
    """Best objective over indicator directions of the upper level sets of ``u``.

    The objective at ``u`` is a nonnegative combination of its values at these
    indicators, so a positive value at ``u`` shows up at one of them, and the
    indicator values are computed without solver tolerances.
    """
    order = np.argsort(-u, kind="stable")
    best, best_u = 0.0, np.zeros(p.size)
    for k in range(1, p.size):
        ind = np.zeros(p.size)
        ind[order[:k]] = 1.0
        val = convex_objective(ind, p, realizations)[0] / np.sqrt(k)
        if val > best:
            best, best_u = val, ind / np.sqrt(k)
    return best, best_u


def _lp_certificate(p: NDArray, realizations) -> tuple[float, NDArray]:
    """Exact maximum of the same objective over the box [-1, 1]^n.

    The objective is positively homogeneous, so its sign over the box and the
    unit ball agree; the value returned is rescaled to the ball. Solver
    tolerances can hide violations near 1e-8, so the LP solution is only used
    to pick level sets, which are then evaluated directly.
    """
    n, J = p.size, len(realizations)
    cost = np.concatenate([-p, [prob for _, prob in realizations]])
    rows = []
    for j, (members, _) in enumerate(realizations):
        for c in members:
            row = np.zeros(n + J)
            row[c], row[n + j] = 1.0, -1.0
            rows.append(row)
    bounds = [(-1.0, 1.0)] * n + [(None, None)] * J
    res = optimize.linprog(
        cost,
        A_ub=np.array(rows),
        b_ub=np.zeros(len(rows)),
        bounds=bounds,
        method="highs",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        raise RuntimeError(f"linear program failed: {res.message}")
    return _level_set_values(res.x[:n], p, realizations)


def membership_convex(
    partition: RankPartition,
    kappa: int,
    beta: BetaSpec,
    choice_probs: NDArray,
    iterations: int = 2000,
    certify: bool = True,
) -> ConvexMembership:
    """Membership via maximisation of a concave function over the unit ball.

    The optimum is zero exactly when the choice probabilities are a
    selection of the model's top-set distribution. Projected supergradient
    ascent with step 1/sqrt(t) is started from the origin; a positive value
    proves exclusion. Its resolution is about 1/sqrt(iterations), so when
    no positive value is found and ``certify`` is set, a linear program on
    the piecewise-linear objective settles the sign exactly.
    """
    p = np.asarray(choice_probs, dtype=float)
    reals = [(np.array(sorted(R)), prob) for R, prob in realization_probabilities(partition, kappa, beta).items()]
    u = np.zeros(p.size)
    best_val, best_u = 0.0, u.copy()
    grad = p.copy()
    for t in range(1, iterations + 1):
        val, grad = convex_objective(u, p, reals)
        if val > best_val:
            best_val, best_u = val, u.copy()
        u = u + grad / np.sqrt(t)
        norm = np.linalg.norm(u)
        if norm > 1.0:
            u = u / norm
    val, grad = convex_objective(u, p, reals)
    if val > best_val:
        best_val, best_u = val, u.copy()
    if certify and best_val <= CONVEX_TOL:
        lp_val, lp_u = _lp_certificate(p, reals)
        if lp_val > best_val:
            best_val, best_u = lp_val, lp_u
    return ConvexMembership(best_val <= CONVEX_TOL, best_val, best_u, float(np.linalg.norm(grad)), iterations)


# ---------------------------------------------------------------------------
# Grids and projections
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegionRow:
    mean: float
    variance: float
    gamma1: float
    gamma2: float
    min_slack: float
    inside: bool
    pi: Mapping[int, float] | None = None


def region_grid(
    grid: MomentGrid | tuple[NDArray, NDArray],
    system: InequalitySystem,
    pi: Mapping[int, float] | None = None,
) -> list[RegionRow]:
    """Membership of every feasible node of a moment grid."""
    if isinstance(grid, MomentGrid):
        # build from lattice fractions so float round-off cannot push a node off the feasible set
        i, j = np.nonzero(grid.feasible_mask())
        mf, vf = grid.mean_fracs[i], grid.var_fracs[j]
        means, variances = grid.to_moments(mf, vf)
        betas = [beta_from_fractions(m, v, grid.support) for m, v in zip(mf, vf)]
    else:
        means, variances = map(np.asarray, grid)
        betas = [BetaSpec.from_moments(float(e), float(v), system.model.support) for e, v in zip(means, variances)]
    rows = []
    for e, v, beta in zip(means, variances, betas):
        theta = ThetaPoint(beta, pi) if pi is not None else beta
        m = membership_enumerate(theta, system)
        rows.append(RegionRow(float(e), float(v), beta.gamma1, beta.gamma2, m.min_slack, m.inside, pi))
    return rows


@dataclass(frozen=True)
class PiBounds:
    q: int
    lower: float
    upper: float
    feasible_nodes: int


def max_pi_given_beta(system: InequalitySystem, beta: BetaSpec, q: int) -> float | None:
    """Largest mass on size q (rest on kappa) consistent with the inequalities.

    Returns ``None`` when even zero mass violates an inequality.
    """
    A = system.model.containment(beta, system.kappa)
    B = system.model.containment(beta, q)
    L = system.lhs
    if np.min(A - L) < -MEMBERSHIP_TOL:
        return None
    gap = A - B
    binding = gap > 1e-15
    if not binding.any():
        return 1.0
    ratio = (A[binding] - L[binding] + MEMBERSHIP_TOL) / gap[binding]
    return float(np.clip(ratio.min(), 0.0, 1.0))


def pi_bounds(
    systems: Mapping[int, InequalitySystem],
    gamma_nodes: Sequence[BetaSpec],
) -> dict[int, PiBounds]:
    """Bounds on each size mass from its two-size projection.

    ``systems[q]`` must hold the test sets for size ``q`` (sizes kappa and q
    in its model). For q > kappa the lower bound is 0 and the upper bound
    maximises over ``gamma_nodes``; the mass on kappa has upper bound 1 and
    lower bound one minus the upper bound for kappa + 1.
    """
    out = {}
    kappa = None
    for q, system in sorted(systems.items()):
        kappa = system.kappa
        best, feasible = None, 0
        for beta in gamma_nodes:
            val = max_pi_given_beta(system, beta, q)
            if val is None:
                continue
            feasible += 1
            best = val if best is None else max(best, val)
        if best is None:
            raise ValueError(f"no prior on the grid is consistent with the data (q={q})")
        out[q] = PiBounds(q, 0.0, best, feasible)
    if kappa is not None and kappa + 1 in out:
        nxt = out[kappa + 1]
        out[kappa] = PiBounds(kappa, 1.0 - nxt.upper, 1.0, nxt.feasible_nodes)
    return out
