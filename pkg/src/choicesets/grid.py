"""Grids over (E(nu), Var(nu)) and adaptive boundary refinement."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
from numpy.typing import NDArray

from .core import BetaSpec, beta_from_moments

MAX_UNIT_VARIANCE = 0.25


@dataclass(frozen=True, eq=False)
class MomentGrid:
    """Rectangular lattice of (mean, variance) fractions of the support.

    ``mean_fracs`` are fractions of the support width and ``var_fracs`` are
    fractions of the squared width, so a node maps to
    ``E = lo + w*m`` and ``Var = w**2 * v``.
    """

    support: tuple[float, float]
    mean_fracs: NDArray[np.float64]
    var_fracs: NDArray[np.float64]

    @classmethod
    def full(cls, support=(0.0, 0.03), step: float = 0.0005) -> "MomentGrid":
        """Lattice with ``step`` spacing in both fractions (interior means only)."""
        count = int(round(1.0 / step)) - 1
        means = np.linspace(step, 1.0 - step, count)
        variances = np.arange(1, int(round(MAX_UNIT_VARIANCE / step)) + 1) * step
        return cls(tuple(support), means, variances)

    @classmethod
    def regular(cls, support=(0.0, 0.03), n_mean: int = 50, n_var: int = 50) -> "MomentGrid":
        """Cell-centred lattice: ``n_mean`` x ``n_var`` nodes."""
        means = (np.arange(n_mean) + 0.5) / n_mean
        variances = (np.arange(n_var) + 0.5) / n_var * MAX_UNIT_VARIANCE
        return cls(tuple(support), means, variances)

    @property
    def width(self) -> float:
        return self.support[1] - self.support[0]

    def feasible_mask(self) -> NDArray[np.bool_]:
        m = self.mean_fracs[:, None]
        v = self.var_fracs[None, :]
        return m * (1.0 - m) - v > 0

    def nodes(self) -> tuple[NDArray, NDArray]:
        """Feasible (E, Var) pairs in row-major order; infeasible pairs skipped."""
        i, j = np.nonzero(self.feasible_mask())
        return self.to_moments(self.mean_fracs[i], self.var_fracs[j])

    def to_moments(self, m, v):
        return self.support[0] + self.width * np.asarray(m), self.width**2 * np.asarray(v)

    def __len__(self) -> int:
        return int(self.feasible_mask().sum())


def node_beta(mean: float, variance: float, support) -> BetaSpec:
    return beta_from_moments(mean, variance, support)


@dataclass(frozen=True)
class RefinedGrid:
    """Result of an adaptive pass: evaluated nodes with their accept flags."""

    support: tuple[float, float]
    mean: NDArray[np.float64]
    variance: NDArray[np.float64]
    accept: NDArray[np.bool_]
    values: list
    level: NDArray[np.int64]
    spacing: tuple[float, float]

    def accepted(self) -> tuple[NDArray, NDArray]:
        return self.mean[self.accept], self.variance[self.accept]


def adaptive_grid(
    evaluate: Callable[[NDArray, NDArray], tuple[NDArray, list]],
    support=(0.0, 0.03),
    coarse: int = 50,
    levels: int = 2,
    min_step: float = 0.0005,
    extra_points: Iterable[tuple[float, float]] = (),
) -> RefinedGrid:
    """Coarse lattice pass followed by bisection of accept/reject boundary cells.

    ``evaluate(means, variances)`` receives arrays of feasible moment pairs and
    returns ``(accept_flags, per_node_values)``. The coarse lattice has
    ``coarse + 1`` points per axis over mean fraction ``[0, 1]`` and variance
    fraction ``[0, 0.25]``; infeasible lattice points (including zero
    variance) count as rejected.
    Each boundary cell is split in four, ``levels`` times, but never below
    ``min_step`` in mean fraction.
    """
    lo, hi = support
    w = hi - lo
    res = coarse * 2**levels
    dm = 1.0 / res
    dv = MAX_UNIT_VARIANCE / res
    status: dict[tuple[int, int], bool] = {}
    store: dict[tuple[int, int], object] = {}
    level_of: dict[tuple[int, int], int] = {}

    def run(points: list[tuple[int, int]], level: int):
        todo = [p for p in dict.fromkeys(points) if p not in status]
        if not todo:
            return
        ii = np.array([p[0] for p in todo])
        jj = np.array([p[1] for p in todo])
        m = ii * dm
        v = jj * dv
        # exact in integers: m(1-m) > v with m = i/res, v = j/(4 res)
        ok = (4 * ii * (res - ii) > jj * res) & (jj > 0)
        for p in np.array(todo, dtype=object)[~ok]:
            status[tuple(p)] = False
            level_of[tuple(p)] = level
        if ok.any():
            flags, vals = evaluate(lo + w * m[ok], w * w * v[ok])
            for p, f, val in zip([todo[k] for k in np.nonzero(ok)[0]], flags, vals):
                status[p] = bool(f)
                store[p] = val
                level_of[p] = level

    step = 2**levels
    run([(i * step, j * step) for i in range(coarse + 1) for j in range(coarse + 1)], 0)
    cells = [(i * step, j * step, step) for i in range(coarse) for j in range(coarse)]
    for level in range(1, levels + 1):
        mixed = []
        for i, j, s in cells:
            corners = [status[(i, j)], status[(i + s, j)], status[(i, j + s)], status[(i + s, j + s)]]
            if any(corners) and not all(corners):
                mixed.append((i, j, s))
        if not mixed or (mixed[0][2] // 2) * dm < min_step:
            break
        new_cells, pts = [], []
        for i, j, s in mixed:
            h = s // 2
            for a in (0, h):
                for b in (0, h):
                    new_cells.append((i + a, j + b, h))
            pts += [(i + h, j), (i, j + h), (i + h, j + h), (i + s, j + h), (i + h, j + s)]
        run(pts, level)
        cells = new_cells

    extra = [(float(e), float(v)) for e, v in extra_points]
    keys = sorted(p for p in status if p in store)
    mean = np.array([lo + w * p[0] * dm for p in keys])
    var = np.array([w * w * p[1] * dv for p in keys])
    accept = np.array([status[p] for p in keys], dtype=bool)
    values = [store[p] for p in keys]
    lvl = np.array([level_of[p] for p in keys], dtype=np.int64)
    if extra:
        em = np.array([e for e, _ in extra])
        ev = np.array([v for _, v in extra])
        flags, vals = evaluate(em, ev)
        mean = np.concatenate([mean, em])
        var = np.concatenate([var, ev])
        accept = np.concatenate([accept, np.asarray(flags, bool)])
        values = values + list(vals)
        lvl = np.concatenate([lvl, np.full(len(extra), -1)])
    return RefinedGrid(tuple(support), mean, var, accept, values, lvl, (w * dm, w * w * dv))
