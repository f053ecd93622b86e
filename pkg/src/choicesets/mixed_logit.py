"""Top-set probabilities when utility carries an extreme-value disturbance.

Utility is the certainty equivalent of the deductible lottery plus a Gumbel
term with scale ``scale`` (dollars). Conditional on the risk-aversion
coefficient, the probability that a given set of alternatives is exactly the
top group follows from logit formulas by inclusion-exclusion; the
coefficient is integrated out with a fixed quadrature on its support.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import special

from .core import (
    TAYLOR_THRESHOLD,
    BetaSpec,
    CovariateCell,
    DomainError,
    _EXP_LIMIT,
)

MIN_NODES = 8
MAX_INCLUSION_EXCLUSION = 14


# ---------------------------------------------------------------------------
# Certainty equivalents and logit probabilities
# ---------------------------------------------------------------------------


def ce_from_eu(nu: float, eu: ArrayLike) -> NDArray:
    """Invert CARA utility: the sure amount with utility ``eu``."""
    eu = np.asarray(eu, dtype=float)
    if nu == 0:
        return eu
    arg = 1.0 - nu * eu
    if np.any(arg <= 0):
        raise DomainError("1 - nu*EU must be positive")
    return -np.log(arg) / nu


def _ce_kernel(mu, price, amount, nu):
    x = nu * amount
    if np.any(np.abs(x) > _EXP_LIMIT):
        raise DomainError("exp(nu*c) overflows")
    small = np.abs(x) < TAYLOR_THRESHOLD
    safe = np.where(small, 1.0, nu)
    exact = np.log1p(mu * np.expm1(x)) / safe
    series = mu * amount * (1.0 + x * (1.0 - mu) / 2.0)
    return -price - np.where(small, series, exact)


def certainty_equivalents(cell: CovariateCell, nu: ArrayLike) -> NDArray:
    """Certainty equivalent (dollars) of every alternative; shape ``shape(nu) + (|D|,)``."""
    nu_a = np.asarray(nu, dtype=float)[..., None]
    return np.asarray(_ce_kernel(cell.mu, cell.prices, cell.feasible.amounts, nu_a))


def certainty_equivalent(alt: int, cell: CovariateCell, nu: float) -> float:
    return float(certainty_equivalents(cell, nu)[alt])


def logit_probabilities(values: ArrayLike, scale: float) -> NDArray:
    """Softmax of ``values/scale`` along the last axis (log-sum-exp stabilised)."""
    return special.softmax(np.asarray(values, dtype=float) / scale, axis=-1)


def logit_choice_prob(target: int, G: Iterable[int], cell: CovariateCell, nu: float, scale: float) -> float:
    G = sorted(set(int(g) for g in G))
    if target not in G:
        raise ValueError("target must belong to G")
    ce = certainty_equivalents(cell, nu)[G]
    return float(logit_probabilities(ce, scale)[G.index(target)])


def top_union_prob(K: Iterable[int], cell: CovariateCell, nu: float, scale: float) -> float:
    """Probability that the overall first best lies in ``K``."""
    p = logit_probabilities(certainty_equivalents(cell, nu), scale)
    return float(p[sorted(set(K))].sum())


# ---------------------------------------------------------------------------
# Realization probabilities
# ---------------------------------------------------------------------------


def _subset_lse(z: NDArray) -> NDArray:
    """log-sum-exp of ``z[..., S]`` for every bitmask S (index 0 is -inf)."""
    n = z.shape[-1]
    out = np.full(z.shape[:-1] + (1 << n,), -np.inf)
    for mask in range(1, 1 << n):
        low = mask & -mask
        j = low.bit_length() - 1
        out[..., mask] = np.logaddexp(out[..., mask ^ low], z[..., j])
    return out


def _mask(items: Iterable[int]) -> int:
    m = 0
    for i in items:
        m |= 1 << int(i)
    return m


def realization_table(ce: NDArray, scale: float, size: int) -> tuple[list[frozenset], NDArray]:
    """Probabilities that each ``size``-subset is exactly the top group.

    ``ce`` has shape ``(..., n)``; returns the subsets (lexicographic) and an
    array ``(..., n_subsets)``.
    """
    n = ce.shape[-1]
    if not 1 <= size <= n:
        raise ValueError("size must lie in [1, n]")
    if n > MAX_INCLUSION_EXCLUSION:
        raise ValueError("too many alternatives for inclusion-exclusion")
    lse = _subset_lse(np.asarray(ce, float) / scale)
    full = (1 << n) - 1
    subsets = [frozenset(c) for c in itertools.combinations(range(n), size)]
    out = np.zeros(ce.shape[:-1] + (len(subsets),))
    for k, Dj in enumerate(subsets):
        comp = full ^ _mask(Dj)
        if comp == 0:
            out[..., k] = 1.0
            continue
        acc = np.zeros(ce.shape[:-1])
        members = sorted(Dj)
        for r in range(1, len(members) + 1):
            sign = 1.0 if r % 2 else -1.0
            for T in itertools.combinations(members, r):
                t = _mask(T)
                acc += sign * np.exp(lse[..., t] - lse[..., t | comp])
        out[..., k] = acc
    return subsets, np.clip(out, 0.0, 1.0)


def realization_prob(Dj: Iterable[int], cell: CovariateCell, nu: float, scale: float) -> float:
    """P(every member of ``Dj`` beats every non-member | nu)."""
    Dj = frozenset(int(d) for d in Dj)
    subsets, table = realization_table(certainty_equivalents(cell, nu), scale, len(Dj))
    return float(table[subsets.index(Dj)])


# ---------------------------------------------------------------------------
# Quadrature over the prior
# ---------------------------------------------------------------------------


def quadrature_nodes(support: tuple[float, float], n_nodes: int = 64, rule: str = "gauss-legendre"):
    """Fixed nodes on the support and the rule-specific base weights.

    ``gauss-legendre``: Legendre nodes with weights multiplied by the prior
    density at evaluation time. ``beta-mass``: the same nodes, each weighted
    by the prior mass of the region closer to it than to any other node.
    """
    if n_nodes < MIN_NODES:
        raise ValueError(f"at least {MIN_NODES} quadrature nodes are required")
    lo, hi = support
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    nodes = lo + (hi - lo) * (x + 1.0) / 2.0
    base = w * (hi - lo) / 2.0
    if rule not in ("gauss-legendre", "beta-mass"):
        raise ValueError(f"unknown quadrature rule {rule!r}")
    return nodes, base


def quadrature_weights(beta: BetaSpec, nodes: NDArray, base: NDArray, rule: str = "gauss-legendre") -> NDArray:
    if rule == "gauss-legendre":
        w = base * beta.pdf(nodes)
    else:
        edges = np.concatenate([[beta.support_lo], 0.5 * (nodes[1:] + nodes[:-1]), [beta.support_hi]])
        w = beta.masses(edges)
    total = w.sum()
    if not np.isfinite(total) or total <= 0:
        raise ValueError("quadrature weights degenerate for this prior")
    return w / total


@dataclass(frozen=True)
class MixedLogitSpec:
    """Disturbance scale, prior on nu and the quadrature used to integrate it."""

    scale: float
    prior: BetaSpec
    n_nodes: int = 64
    rule: str = "gauss-legendre"

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.n_nodes < MIN_NODES:
            raise ValueError(f"at least {MIN_NODES} quadrature nodes are required")

    def quadrature(self) -> tuple[NDArray, NDArray]:
        nodes, base = quadrature_nodes(self.prior.support, self.n_nodes, self.rule)
        return nodes, quadrature_weights(self.prior, nodes, base, self.rule)


def containment_prob_mixed(K: Iterable[int], q: int, cell: CovariateCell, spec: MixedLogitSpec) -> float:
    """P(top |D|-q+1 group meets K), integrated over the prior on nu."""
    n = len(cell.feasible)
    K = frozenset(int(k) for k in K)
    if not K:
        raise ValueError("test set must be nonempty")
    nodes, w = spec.quadrature()
    subsets, table = realization_table(certainty_equivalents(cell, nodes), spec.scale, n - q + 1)
    hit = np.array([bool(Dj & K) for Dj in subsets])
    return float(w @ table[:, hit].sum(axis=1))


def noise_scale(fraction: float, mean_gap: float) -> float:
    """Gumbel scale whose standard deviation is ``fraction * mean_gap``."""
    return fraction * mean_gap * math.sqrt(6.0) / math.pi


def mean_adjacent_gap(cells: Sequence[CovariateCell]) -> float:
    """Average absolute price difference between neighbouring alternatives."""
    gaps = [np.mean(np.abs(np.diff(c.prices))) for c in cells]
    return float(np.mean(gaps))


class MixedLogitModel:
    """Containment probabilities for many cells, vectorised over priors.

    Conditional-on-nu containment at the fixed quadrature nodes does not
    depend on the prior, so it is tabulated once per cell.
    """

    def __init__(
        self,
        cells: Sequence[CovariateCell],
        test_sets,
        sizes: Iterable[int],
        scale: float,
        support=(0.0, 0.03),
        n_nodes: int = 64,
        rule: str = "gauss-legendre",
    ):
        self.cells = tuple(cells)
        self.test_sets = test_sets
        self.sizes = tuple(sorted(set(int(q) for q in sizes)))
        self.scale = float(scale)
        self.support = tuple(support)
        self.rule = rule
        self.nodes, self._base = quadrature_nodes(self.support, n_nodes, rule)
        n = len(self.cells[0].feasible)
        ce = np.stack([certainty_equivalents(c, self.nodes) for c in self.cells])
        self._cond = {}
        for q in self.sizes:
            subsets, table = realization_table(ce, self.scale, n - q + 1)
            hit = np.array([[1.0 if Dj & K else 0.0 for K in test_sets.sets] for Dj in subsets])
            self._cond[q] = table @ hit  # cells x nodes x K

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def weights(self, beta: BetaSpec) -> NDArray:
        return quadrature_weights(beta, self.nodes, self._base, self.rule)

    def containment(self, beta: BetaSpec, q: int) -> NDArray:
        return np.einsum("n,cnk->ck", self.weights(beta), self._cond[q])

    def rhs(self, theta, kappa: int) -> NDArray:
        if isinstance(theta, BetaSpec):
            return self.containment(theta, kappa)
        if theta.pi is None:
            return self.containment(theta.beta, kappa)
        return sum(w * self.containment(theta.beta, q) for q, w in theta.pi.items() if w != 0.0)
