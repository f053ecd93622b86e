"""Sample moment inequalities, the KS statistic, GMS bootstrap and confidence sets.

Each inequality row is a (instrument j, test set K) pair with per-record
moment function ``1{x_i in B_j} * (1{d_i in K} - P(D* meets K | x_i; theta))``.
Records sharing a covariate cell share the model probability, so every sum
over records reduces to counts per (cell, alternative). The bootstrap
resamples record indices, and each replicate's counts are tabulated once; a
candidate theta then only needs one sparse contraction per replicate block.
"""

from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg, sparse

from .core import ThetaPoint, beta_from_fractions, beta_from_moments
from .data import Dataset, stream
from .grid import MomentGrid, RefinedGrid, adaptive_grid
from .identification import TestSetCollection

SIGMA_FLOOR = 1e-10
XI = 1e-6
DEFAULT_B = 1000
RHO_SHRINK = 0.2
VARIANCE_REG = 0.05
FD_STEP = 1e-4


# ---------------------------------------------------------------------------
# Instruments
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class InstrumentCells:
    """Covariate boxes in standardized coordinates and record membership.

    ``transform`` is the upper-triangular matrix T with ``z = (x - center) @ T``
    (identity for value cells). ``cubes`` holds (lower, upper) corner pairs;
    the last cube is the all-data box.
    """

    transform: NDArray[np.float64]
    center: NDArray[np.float64]
    cubes: tuple[tuple[NDArray, NDArray], ...]
    membership: NDArray[np.bool_]
    labels: tuple[str, ...] = ()

    def __len__(self) -> int:
        return self.membership.shape[1]

    def standardize(self, x: ArrayLike) -> NDArray:
        return (np.asarray(x, dtype=float) - self.center) @ self.transform

    def counts(self) -> NDArray[np.int64]:
        return self.membership.sum(axis=0)


def _axis_bins(z: NDArray, q: int) -> tuple[NDArray, NDArray]:
    """Empirical q-tile edges and the bin of each value (top edge closed)."""
    edges = np.quantile(z, np.linspace(0.0, 1.0, q + 1))
    bins = np.clip(np.searchsorted(edges[1:-1], z, side="right"), 0, q - 1)
    return edges, bins


def build_hypercubes(x: ArrayLike, axis_quantile_count: int = 8) -> InstrumentCells:
    """Quantile boxes on Cholesky-standardized covariates plus the all-data box.

    With ``q`` cuts per axis there are ``q**d`` boxes; ``q = 1`` makes the
    only box coincide with the all-data box and the duplicate is dropped.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError("covariates must be an (n, d) array")
    n, d = x.shape
    q = int(axis_quantile_count)
    if q < 1:
        raise ValueError("axis_quantile_count must be positive")
    if n < q * q:
        raise ValueError(f"need at least {q * q} observations")
    center = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    try:
        upper = linalg.cholesky(cov, lower=False)
    except linalg.LinAlgError as exc:
        raise ValueError("covariate covariance is degenerate") from exc
    if np.min(np.abs(np.diag(upper))) <= 1e-12 * max(1.0, np.max(np.abs(np.diag(upper)))):
        raise ValueError("covariate covariance is degenerate")
    transform = linalg.solve_triangular(upper, np.eye(d), lower=False)
    z = (x - center) @ transform
    if q == 1:
        lo, hi = z.min(axis=0), z.max(axis=0)
        return InstrumentCells(transform, center, ((lo, hi),), np.ones((n, 1), bool), ("all",))
    edges, bins = zip(*(_axis_bins(z[:, k], q) for k in range(d)))
    bins = np.column_stack(bins)
    code = np.ravel_multi_index(tuple(bins.T), (q,) * d)
    cubes, labels = [], []
    for combo in itertools.product(range(q), repeat=d):
        lo = np.array([edges[k][combo[k]] for k in range(d)])
        hi = np.array([edges[k][combo[k] + 1] for k in range(d)])
        cubes.append((lo, hi))
        labels.append("box" + "-".join(str(c) for c in combo))
    member = np.zeros((n, q**d + 1), dtype=bool)
    member[np.arange(n), code] = True
    member[:, -1] = True
    cubes.append((z.min(axis=0), z.max(axis=0)))
    labels.append("all")
    return InstrumentCells(transform, center, tuple(cubes), member, tuple(labels))


def value_cells(x: ArrayLike) -> InstrumentCells:
    """One instrument per distinct covariate value plus the all-data one."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    uniq, inverse = np.unique(x, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    n, d = x.shape
    member = np.zeros((n, len(uniq) + 1), dtype=bool)
    member[np.arange(n), inverse] = True
    member[:, -1] = True
    cubes = tuple((row, row) for row in uniq) + ((x.min(axis=0), x.max(axis=0)),)
    labels = tuple("value" + "-".join(f"{v:g}" for v in row) for row in uniq) + ("all",)
    return InstrumentCells(np.eye(d), np.zeros(d), cubes, member, labels)


# ---------------------------------------------------------------------------
# Moment tables and the KS statistic
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MomentTable:
    """Sample means and standard deviations per (instrument, test set) row."""

    mean: NDArray[np.float64]
    sd: NDArray[np.float64]
    n: int

    @property
    def flagged(self) -> NDArray[np.bool_]:
        return self.sd < SIGMA_FLOOR

    @property
    def studentized(self) -> NDArray[np.float64]:
        """sqrt(n) * mean / sd with the floor applied; flagged rows read 0."""
        t = math.sqrt(self.n) * self.mean / np.maximum(self.sd, SIGMA_FLOOR)
        return np.where(self.flagged, 0.0, t)


def ks_statistic(table: MomentTable) -> float:
    """n times the squared largest positive studentized mean (0 without violations)."""
    if table.mean.size == 0:
        return 0.0
    worst = np.max(table.mean / np.maximum(table.sd, SIGMA_FLOOR))
    return float(table.n * max(worst, 0.0) ** 2)


def gms_tuning(n: int) -> tuple[float, float]:
    """(tau_n, beta_n) for moment selection."""
    ln = math.log(n)
    return math.sqrt(0.3 * ln), math.sqrt(0.4 * ln / math.log(ln))


def _quantile(values: NDArray, level: float) -> float:
    return float(np.quantile(values, min(level, 1.0), method="inverted_cdf"))


def _resample_indices(seed: int, b: int, n: int) -> NDArray[np.int64]:
    return stream(seed, 1, b).integers(0, n, n)


def gms_critical_from_draws(
    draws: NDArray, table: MomentTable, alpha: float, xi: float = XI
) -> float:
    """GMS critical value from recentred studentized bootstrap draws (B x rows)."""
    if not 0.0 < alpha < 0.5:
        raise ValueError("alpha must lie in (0, 0.5)")
    tau, beta = gms_tuning(table.n)
    keep = ~table.flagged.ravel()
    t = table.studentized.ravel()[keep]
    shift = np.where(t / tau >= -1.0, 0.0, -beta)
    v = draws.reshape(draws.shape[0], -1)[:, keep] + shift
    if v.shape[1] == 0:
        stats = np.zeros(draws.shape[0])
    else:
        stats = np.maximum(v.max(axis=1), 0.0) ** 2
    return _quantile(stats, 1.0 - alpha + xi)


class ObservationMoments:
    """Moment inequalities given directly as a per-record matrix (n x rows)."""

    def __init__(self, values: ArrayLike, B: int = DEFAULT_B, seed: int = 0):
        x = np.asarray(values, dtype=float)
        self.values = x[:, None] if x.ndim == 1 else x
        self.n = self.values.shape[0]
        self.B = int(B)
        self.seed = int(seed)

    def table(self) -> MomentTable:
        return MomentTable(self.values.mean(axis=0), self.values.std(axis=0), self.n)

    def bootstrap(self, table: MomentTable | None = None) -> NDArray:
        table = table or self.table()
        sd = np.maximum(table.sd, SIGMA_FLOOR)
        out = np.empty((self.B, self.values.shape[1]))
        for b in range(self.B):
            idx = _resample_indices(self.seed, b, self.n)
            out[b] = math.sqrt(self.n) * (self.values[idx].mean(axis=0) - table.mean) / sd
        return out

    def critical_value(self, alpha: float = 0.05) -> float:
        table = self.table()
        return gms_critical_from_draws(self.bootstrap(table), table, alpha)


# ---------------------------------------------------------------------------
# Aggregated moment inequalities for a choice model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NodeResult:
    statistic: float
    critical: float
    accept: bool


class MomentInequalities:
    """Moment inequalities for one dataset, model, test-set family and instrument set.

    ``model.rhs(theta, kappa)`` must return a (cells x test sets) array of
    model probabilities aligned with ``dataset.cell_index().cells``. Every
    record in a covariate cell must belong to the same instruments.
    """

    def __init__(
        self,
        dataset: Dataset,
        model,
        test_sets: TestSetCollection,
        kappa: int,
        instruments: InstrumentCells,
        B: int = DEFAULT_B,
        seed: int = 0,
        threads: int = 1,
        variance_reg: float = VARIANCE_REG,
    ):
        if B and B < 100:
            raise ValueError("at least 100 bootstrap replicates are required")
        ci = dataset.cell_index()
        self.dataset = dataset
        self.model = model
        self.test_sets = test_sets
        self.kappa = int(kappa)
        self.instruments = instruments
        self.B = int(B)
        self.seed = int(seed)
        self.threads = max(1, int(threads))
        if variance_reg < 0:
            raise ValueError("variance regularization must be nonnegative")
        self.variance_reg = float(variance_reg)
        self.n = len(dataset)
        self.n_cells = len(ci)
        self.n_alt = dataset.n_alternatives
        member = instruments.membership
        _, first = np.unique(ci.index, return_index=True)
        cell_member = member[first]
        if not np.array_equal(member, cell_member[ci.index]):
            raise ValueError("instrument membership must be constant within covariate cells")
        self.J = member.shape[1]
        self.K = len(test_sets)
        self._bt = sparse.csr_matrix(cell_member.T.astype(float))
        self._ind = test_sets.indicator()
        self._code = ci.index * self.n_alt + dataset.choice
        counts = np.bincount(self._code, minlength=self.n_cells * self.n_alt).reshape(self.n_cells, self.n_alt)
        self._Nc = counts.sum(axis=1).astype(float)
        self._S = counts @ self._ind
        self._boot: tuple[NDArray, NDArray] | None = None

    # -- sample side -------------------------------------------------------

    def _contract(self, per_cell: NDArray) -> NDArray:
        """Sum a (cells x ...) array over cells within each instrument."""
        flat = per_cell.reshape(self.n_cells, -1)
        return np.asarray(self._bt @ flat).reshape((self.J,) + per_cell.shape[1:])

    def probabilities(self, theta) -> NDArray:
        return np.asarray(self.model.rhs(theta, self.kappa), dtype=float)

    def table(self, theta, probs: NDArray | None = None) -> MomentTable:
        """Sample means and (regularized) standard deviations.

        With ``variance_reg = eps > 0`` each row's variance gets ``eps`` times
        the variance of the same test set's moment over the whole sample
        added. This keeps rows from small cells whose outcomes all fall on
        one side of K from being studentized by a near-zero spread.
        """
        P = self.probabilities(theta) if probs is None else probs
        S, Nc = self._S, self._Nc[:, None]
        first_c = S - Nc * P
        second_c = S * (1.0 - 2.0 * P) + Nc * P * P
        mean = self._contract(first_c) / self.n
        var = np.maximum(self._contract(second_c) / self.n - mean * mean, 0.0)
        if self.variance_reg:
            m_all = first_c.sum(axis=0) / self.n
            var_all = np.maximum(second_c.sum(axis=0) / self.n - m_all * m_all, 0.0)
            var = var + self.variance_reg * var_all[None, :]
        return MomentTable(mean, np.sqrt(var), self.n)

    def statistic(self, theta) -> float:
        return ks_statistic(self.table(theta))

    # -- bootstrap -------------------------------------------------------------

    def _replicate_counts(self, b: int) -> NDArray:
        idx = _resample_indices(self.seed, b, self.n)
        return np.bincount(self._code[idx], minlength=self.n_cells * self.n_alt)

    def _draws(self) -> tuple[NDArray, NDArray]:
        """Per replicate: instrument-summed count deviations and cell-size deviations."""
        if self._boot is None:
            if not self.B:
                raise ValueError("no bootstrap replicates configured")
            with ThreadPoolExecutor(self.threads) as pool:
                counts = list(pool.map(self._replicate_counts, range(self.B)))
            counts = np.stack(counts).reshape(self.B, self.n_cells, self.n_alt).astype(float)
            dN = counts.sum(axis=2) - self._Nc[None, :]
            dS = counts @ self._ind - self._S[None]
            # (J, B, K) -> (B, J, K)
            DS = self._contract(np.transpose(dS, (1, 0, 2))).transpose(1, 0, 2)
            self._boot = (DS, dN)
        return self._boot

    def bootstrap(self, theta, table: MomentTable | None = None, probs: NDArray | None = None) -> NDArray:
        """Recentred studentized bootstrap moments, shape (B, J, K)."""
        P = self.probabilities(theta) if probs is None else probs
        table = table or self.table(theta, P)
        DS, dN = self._draws()
        term = self._contract(dN.T[:, :, None] * P[:, None, :]).transpose(1, 0, 2)
        sd = np.maximum(table.sd, SIGMA_FLOOR)
        return (DS - term) / (math.sqrt(self.n) * sd[None])

    def critical_value(self, theta, alpha: float = 0.05, table: MomentTable | None = None) -> float:
        P = self.probabilities(theta)
        table = table or self.table(theta, P)
        return gms_critical_from_draws(self.bootstrap(theta, table, P), table, alpha)

    def test(self, theta, alpha: float = 0.05) -> NodeResult:
        P = self.probabilities(theta)
        table = self.table(theta, P)
        stat = ks_statistic(table)
        crit = gms_critical_from_draws(self.bootstrap(theta, table, P), table, alpha)
        return NodeResult(stat, crit, bool(stat <= crit + XI))

    def map(self, fn: Callable, items: Sequence) -> list:
        """Apply ``fn`` to each item, in order, on the configured threads."""
        if self.B:
            self._draws()
        if self.threads == 1 or len(items) < 2:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(self.threads) as pool:
            return list(pool.map(fn, items))


def sample_moments(system: MomentInequalities, theta) -> MomentTable:
    return system.table(theta)


def gms_bootstrap_critical(system: MomentInequalities, theta, alpha: float = 0.05) -> float:
    return system.critical_value(theta, alpha)


# ---------------------------------------------------------------------------
# Confidence sets over (E(nu), Var(nu))
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConfidenceSet:
    """Per-node AS test results; ``level`` is -1 for user-supplied extra points."""

    support: tuple[float, float]
    alpha: float
    mean: NDArray[np.float64]
    variance: NDArray[np.float64]
    statistic: NDArray[np.float64]
    critical: NDArray[np.float64]
    accept: NDArray[np.bool_]
    level: NDArray[np.int64]

    def __len__(self) -> int:
        return self.mean.size

    def accepted(self) -> tuple[NDArray, NDArray]:
        return self.mean[self.accept], self.variance[self.accept]

    def projection(self, coord: str = "mean") -> tuple[float, float]:
        vals = (self.mean if coord == "mean" else self.variance)[self.accept]
        if vals.size == 0:
            return (math.nan, math.nan)
        return float(vals.min()), float(vals.max())

    def rows(self) -> list[dict]:
        return [
            {"E": float(e), "Var": float(v), "T_n": float(t), "critical": float(c), "accept": bool(a)}
            for e, v, t, c, a in zip(self.mean, self.variance, self.statistic, self.critical, self.accept)
        ]


def as_confidence_set(
    system: MomentInequalities,
    alpha: float = 0.05,
    support=(0.0, 0.03),
    grid: MomentGrid | None = None,
    coarse: int = 50,
    levels: int = 2,
    extra_points: Iterable[tuple[float, float]] = (),
) -> ConfidenceSet:
    """AS confidence set: theta kept iff T_n <= c_hat + xi.

    With ``grid`` the nodes of that lattice are tested; otherwise an adaptive
    pass (coarse lattice, then boundary bisection) is run.
    """
    support = tuple(float(s) for s in support)

    def run(thetas):
        return system.map(lambda th: system.test(th, alpha), thetas)

    def evaluate(means, variances):
        res = run([beta_from_moments(m, v, support) for m, v in zip(means, variances)])
        return [r.accept for r in res], res

    if grid is not None:
        i, j = np.nonzero(grid.feasible_mask())
        mf, vf = grid.mean_fracs[i], grid.var_fracs[j]
        res = run([beta_from_fractions(m, v, support) for m, v in zip(mf, vf)])
        means, variances = grid.to_moments(mf, vf)
        extra = list(extra_points)
        if extra:
            _, extra_res = evaluate([e for e, _ in extra], [v for _, v in extra])
            res = res + extra_res
            means = np.concatenate([means, [e for e, _ in extra]])
            variances = np.concatenate([variances, [v for _, v in extra]])
        level = np.zeros(len(res), dtype=np.int64)
        if extra:
            level[-len(extra):] = -1
    else:
        rg: RefinedGrid = adaptive_grid(evaluate, support, coarse, levels, extra_points=extra_points)
        means, variances, res, level = rg.mean, rg.variance, rg.values, rg.level
    return ConfidenceSet(
        support,
        alpha,
        np.asarray(means, float),
        np.asarray(variances, float),
        np.array([r.statistic for r in res], float),
        np.array([r.critical for r in res], float),
        np.array([r.accept for r in res], bool),
        np.asarray(level, np.int64),
    )


# ---------------------------------------------------------------------------
# Profiled projection intervals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Coordinates:
    """Unit-free parameter vector z -> model parameter.

    z = (mean fraction of the support, variance fraction of width**2), with a
    third entry pi_q when ``pi_sizes = (kappa, q)`` is set (the remaining mass
    sits on kappa).
    """

    support: tuple[float, float] = (0.0, 0.03)
    pi_sizes: tuple[int, int] | None = None

    @property
    def dim(self) -> int:
        return 2 if self.pi_sizes is None else 3

    @property
    def width(self) -> float:
        return self.support[1] - self.support[0]

    def moments(self, z) -> tuple[float, float]:
        return self.support[0] + self.width * z[0], self.width**2 * z[1]

    def inside(self, z) -> bool:
        ok = z[0] * (1 - z[0]) - z[1] > 0 and z[1] > 0
        if self.pi_sizes is not None:
            ok = ok and 0.0 <= z[2] <= 1.0
        return bool(ok)

    def theta(self, z):
        beta = beta_from_fractions(z[0], z[1], self.support)
        if self.pi_sizes is None:
            return beta
        k, q = self.pi_sizes
        pi = float(z[2])
        return ThetaPoint(beta, {k: 1.0 - pi, q: pi})

    def from_moments(self, mean, variance, pi=None) -> NDArray:
        z = [(mean - self.support[0]) / self.width, variance / self.width**2]
        if self.pi_sizes is not None:
            z.append(0.0 if pi is None else pi)
        return np.array(z, dtype=float)


def target_function(name: str, coords: Coordinates) -> Callable[[NDArray], float]:
    """Named targets: ``mean``, ``variance``, ``pi`` (needs pi_sizes), ``constant:<v>``."""
    if name == "mean":
        return lambda z: coords.moments(z)[0]
    if name == "variance":
        return lambda z: coords.moments(z)[1]
    if name == "pi":
        if coords.pi_sizes is None:
            raise ValueError("pi target needs pi_sizes")
        return lambda z: float(z[2])
    if name.startswith("constant:"):
        value = float(name.split(":", 1)[1])
        return lambda z: value
    raise ValueError(f"unknown target {name!r}")


@dataclass(frozen=True)
class ProfiledInterval:
    target: str
    lower: float
    upper: float
    alpha: float
    B: int
    seed: int
    n_candidates: int
    n_feasible: int
    rejected: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def _fd_gradient(fn: Callable[[NDArray], NDArray], z: NDArray, inside: Callable, step: float = FD_STEP) -> NDArray:
    """Columns of d fn / d z_i; one-sided where a central step leaves the domain."""
    base = None
    cols = []
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = step
        up, down = inside(z + e), inside(z - e)
        if up and down:
            cols.append((fn(z + e) - fn(z - e)) / (2 * step))
        elif up or down:
            base = fn(z) if base is None else base
            cols.append((fn(z + e) - base) / step if up else (base - fn(z - e)) / step)
        else:
            base = fn(z) if base is None else base
            cols.append(np.zeros_like(base))
    return np.stack(cols, axis=-1)


def _lambda_set(p: NDArray, rho: float, points_per_dim: int | None = None) -> NDArray:
    """Points of the rho-box with p'lambda = 0 (columns), always including 0."""
    d = p.size
    norm = np.linalg.norm(p)
    if norm == 0:
        basis = np.eye(d)
    else:
        _, _, vt = np.linalg.svd(p[None, :] / norm)
        basis = vt[1:].T
    k = basis.shape[1]
    if k == 0:
        return np.zeros((d, 1))
    m = points_per_dim or {1: 41, 2: 15}.get(k, 9)
    t = np.linspace(-rho * math.sqrt(d), rho * math.sqrt(d), m)
    grid = np.array(list(itertools.product(t, repeat=k))).T
    lam = basis @ grid
    lam = lam[:, np.all(np.abs(lam) <= rho * (1 + 1e-12), axis=0)]
    return np.concatenate([np.zeros((d, 1)), lam], axis=1)


def _profile_check(system: MomentInequalities, coords: Coordinates, f, z: NDArray, alpha: float, rho: float) -> bool:
    """Is z inside the profiled constraint set for ``f``?"""
    theta = coords.theta(z)
    P = system.probabilities(theta)
    table = system.table(theta, P)
    t = table.studentized
    keep = ~table.flagged
    worst = float(np.max(t[keep])) if keep.any() else 0.0
    if worst <= 0.0:
        return True
    tau, _ = gms_tuning(system.n)
    sel = keep & (t / tau >= -1.0)
    if not sel.any():
        return True
    G = system.bootstrap(theta, table, P)[:, sel]
    # lambda = 0 bounds the calibrated value from above
    c0 = max(_quantile(G.max(axis=1), 1.0 - alpha), 0.0)
    if worst > c0:
        return False

    def mbar(zz):
        return system.table(coords.theta(zz)).mean

    grad = _fd_gradient(mbar, z, coords.inside)
    D = grad[sel] / np.maximum(table.sd[sel], SIGMA_FLOOR)[:, None]
    p = _fd_gradient(lambda zz: np.atleast_1d(f(zz)), z, coords.inside)[0]
    lam = _lambda_set(p, rho)
    shifts = D @ lam  # (rows, L)
    cb = np.full(G.shape[0], np.inf)
    for chunk in np.array_split(np.arange(shifts.shape[1]), max(1, shifts.shape[1] // 16)):
        vals = (G[:, :, None] + shifts[None, :, chunk]).max(axis=1)
        cb = np.minimum(cb, vals.min(axis=1))
    c = max(_quantile(cb, 1.0 - alpha), 0.0)
    return worst <= c


def profiled_interval(
    system: MomentInequalities,
    target: str | Callable[[NDArray], float],
    candidates: ArrayLike,
    coords: Coordinates | None = None,
    alpha: float = 0.05,
    rho_shrink: float = RHO_SHRINK,
) -> ProfiledInterval:
    """Min and max of ``target`` over candidates meeting the profiled constraints.

    Each candidate z is kept if every studentized sample moment lies below a
    critical value calibrated by a hard-threshold GMS bootstrap in which the
    parameter may move locally (``lambda``) in directions that leave the
    target unchanged. The local box has radius ``(1 - rho_shrink) *
    sqrt(ln(rows))``. With the local move fixed at zero the critical value
    is never larger than the AS one, so on a shared candidate set the interval
    sits inside the projection of the AS confidence set.
    """
    coords = coords or Coordinates()
    f = target_function(target, coords) if isinstance(target, str) else target
    label = target if isinstance(target, str) else getattr(target, "__name__", "custom")
    Z = np.atleast_2d(np.asarray(candidates, dtype=float))
    rho = (1.0 - rho_shrink) * math.sqrt(math.log(max(system.J * system.K, 2)))
    keep = [coords.inside(z) for z in Z]
    Z = Z[np.array(keep, bool)]
    ok = np.array(system.map(lambda z: _profile_check(system, coords, f, z, alpha, rho), list(Z)), bool)
    vals = np.array([f(z) for z in Z[ok]])
    if vals.size == 0:
        return ProfiledInterval(label, math.nan, math.nan, alpha, system.B, system.seed, len(Z), 0, True)
    return ProfiledInterval(label, float(vals.min()), float(vals.max()), alpha, system.B, system.seed, len(Z), int(ok.sum()), False)


def grid_candidates(grid: MomentGrid, pi_values: Sequence[float] | None = None) -> NDArray:
    """Candidate z vectors from a moment lattice, optionally crossed with pi values."""
    i, j = np.nonzero(grid.feasible_mask())
    base = np.column_stack([grid.mean_fracs[i], grid.var_fracs[j]])
    if pi_values is None:
        return base
    pis = np.asarray(pi_values, float)
    return np.column_stack([np.repeat(base, pis.size, axis=0), np.tile(pis, len(base))])
