"""Synthetic choice data with known preferences and choice sets.

Also hosts the benchmark choice-set processes with analytic choice
probabilities: UR (size drawn from a law, then a uniform subset) and ASR
(independent alternative-specific inclusion, conditioned on a minimum size).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import optimize, special

from .core import (
    BetaSpec,
    CovariateCell,
    FeasibleSet,
    RankPartition,
    _eu_kernel,
    _round_half_up,
    beta_from_moments,
    feasible_moments,
    linear_multipliers,
    rank_partition,
)
from .data import Dataset, stream
from .grid import MAX_UNIT_VARIANCE, MomentGrid
from .mixed_logit import _ce_kernel

BLOCK_SIZE = 8192
MAX_REJECTIONS = 1_000_000
MIN_MLE_OBSERVATIONS = 1000
_PENALTY = 1e6

# Median-premium menu of the home deductible application, in cents per deductible.
APPLICATION_DEDUCTIBLES = (100, 200, 250, 500, 1000)
APPLICATION_MEDIAN_PRICES = (26900, 25200, 23500, 18100, 14000)
APPLICATION_MU = 0.085


def application_feasible() -> FeasibleSet:
    return FeasibleSet(APPLICATION_DEDUCTIBLES)


def application_multipliers() -> tuple[float, ...]:
    base = APPLICATION_MEDIAN_PRICES[-1]
    return tuple(p / base for p in APPLICATION_MEDIAN_PRICES)


def application_cell(mu: float = APPLICATION_MU, base_price_cents: int = APPLICATION_MEDIAN_PRICES[-1]) -> CovariateCell:
    """Deductible menu priced with the median multipliers at a given base premium."""
    return CovariateCell.from_rule(application_feasible(), mu, base_price_cents, application_multipliers())


# ---------------------------------------------------------------------------
# Processes and configuration
# ---------------------------------------------------------------------------

CORRELATION_MODES = ("none", "with-nu", "with-price")


@dataclass(frozen=True)
class Process:
    """How an agent's choice set is formed.

    ``low_nu_gets`` picks the end of the deductible ladder offered to agents
    whose nu falls below ``nu_cut`` in the ``with-nu`` mode; the others get
    the opposite end.
    """

    kind: str
    q: int | None = None
    mode: str = "none"
    size_law: tuple[tuple[int, float], ...] | None = None
    phi: tuple[float, ...] | None = None
    kappa: int = 1
    nu_cut: float | None = None
    low_nu_gets: str = "highest"

    def __post_init__(self):
        if self.kind not in ("FP1", "FP2", "UR", "ASR"):
            raise ValueError(f"unknown process {self.kind!r}")
        if self.mode not in CORRELATION_MODES:
            raise ValueError(f"correlation mode must be one of {CORRELATION_MODES}")
        if self.low_nu_gets not in ("highest", "lowest"):
            raise ValueError("low_nu_gets must be 'highest' or 'lowest'")
        if self.kind == "FP2" and self.q is None:
            raise ValueError("FP2 needs a set size q")
        if self.kind == "UR":
            if not self.size_law:
                raise ValueError("UR needs a size law")
            law = tuple(sorted((int(q), float(w)) for q, w in dict(self.size_law).items()))
            if any(w < 0 for _, w in law) or abs(sum(w for _, w in law) - 1.0) > 1e-12:
                raise ValueError("size law must be a probability vector")
            object.__setattr__(self, "size_law", law)
        if self.kind == "ASR":
            if self.phi is None:
                raise ValueError("ASR needs inclusion probabilities")
            phi = tuple(float(p) for p in self.phi)
            if any(not 0.0 <= p <= 1.0 for p in phi):
                raise ValueError("inclusion probabilities must lie in [0, 1]")
            object.__setattr__(self, "phi", phi)

    @classmethod
    def fp1(cls) -> "Process":
        return cls("FP1")

    @classmethod
    def fp2(cls, q: int, mode: str = "none", **kw) -> "Process":
        return cls("FP2", q=q, mode=mode, **kw)

    @classmethod
    def ur(cls, size_law: Mapping[int, float] | int) -> "Process":
        if isinstance(size_law, int):
            size_law = {size_law: 1.0}
        return cls("UR", size_law=tuple(size_law.items()))

    @classmethod
    def asr(cls, phi: Sequence[float], kappa: int = 1) -> "Process":
        return cls("ASR", phi=tuple(phi), kappa=kappa)

    def validate(self, n_alternatives: int):
        if self.kind == "FP2" and not 2 <= self.q <= n_alternatives:
            raise ValueError(f"FP2 set size must lie in [2, {n_alternatives}]")
        if self.kind == "UR" and any(not 1 <= q <= n_alternatives for q, _ in self.size_law):
            raise ValueError("UR sizes must lie in [1, |D|]")
        if self.kind == "ASR":
            if len(self.phi) != n_alternatives:
                raise ValueError("one inclusion probability per alternative")
            if not 1 <= self.kappa <= n_alternatives:
                raise ValueError("kappa must lie in [1, |D|]")


@dataclass(frozen=True)
class DgpConfig:
    """Everything needed to generate one synthetic dataset."""

    feasible: FeasibleSet
    mu: float | tuple[float, ...]
    base_prices_cents: tuple[int, ...]
    nu_law: BetaSpec
    process: Process
    n: int
    seed: int = 0
    multipliers: tuple[float, ...] | None = None
    zeta_cents: int = 0
    noise_scale: float | None = None

    def __post_init__(self):
        mus = self.mu_values
        if any(not 0.0 <= m < 1.0 for m in mus):
            raise ValueError("claim probabilities must lie in [0, 1)")
        if not self.base_prices_cents:
            raise ValueError("at least one base price is required")
        if self.n < 0:
            raise ValueError("sample size must be nonnegative")
        if self.noise_scale is not None and not self.noise_scale > 0:
            raise ValueError("noise scale must be positive")
        self.process.validate(len(self.feasible))

    @property
    def mu_values(self) -> tuple[float, ...]:
        return tuple(np.atleast_1d(np.asarray(self.mu, dtype=float)).tolist())

    @property
    def g(self) -> NDArray:
        if self.multipliers is None:
            return linear_multipliers(self.feasible)
        return np.asarray(self.multipliers, dtype=float)

    def price_table(self) -> NDArray[np.int64]:
        """Cents for (base price index, alternative)."""
        base = np.asarray(self.base_prices_cents, dtype=float)
        return _round_half_up(self.g[None, :] * base[:, None] + self.zeta_cents)

    def cells(self) -> list[CovariateCell]:
        return [
            CovariateCell.from_rule(self.feasible, m, int(b), self.g, self.zeta_cents)
            for m in self.mu_values
            for b in self.base_prices_cents
        ]

    def nu_cut(self) -> float:
        if self.process.nu_cut is not None:
            return self.process.nu_cut
        b = self.nu_law
        return float(b.support_lo + b.width * special.betaincinv(b.gamma1, b.gamma2, 0.5))

    @classmethod
    def reference_design(cls, process: Process, n: int, seed: int = 0, **kw) -> "DgpConfig":
        """101 deductibles $10..$1010, base premia $10..$1000, nu ~ 0.01*Beta(1,1), mu = 0.10."""
        opts = dict(
            feasible=FeasibleSet.evenly_spaced(10, 1010, 10),
            mu=0.10,
            base_prices_cents=tuple(range(1000, 100001, 1000)),
            nu_law=BetaSpec(1.0, 1.0, 0.0, 0.01),
        )
        opts.update(kw)
        return cls(process=process, n=n, seed=seed, **opts)


# ---------------------------------------------------------------------------
# Drawing choice sets
# ---------------------------------------------------------------------------


def _uniform_subsets(rng, rows: int, n: int, sizes: NDArray) -> NDArray[np.bool_]:
    keys = rng.random((rows, n))
    ranks = np.argsort(np.argsort(keys, axis=1), axis=1)
    return ranks < np.asarray(sizes)[:, None]


def _window(n: int, q: int, start: NDArray) -> NDArray[np.bool_]:
    idx = np.arange(n)[None, :]
    return (idx >= start[:, None]) & (idx < start[:, None] + q)


def _draw_sets(config: DgpConfig, nu, base_idx, rng, rejections: list[int]) -> NDArray[np.bool_]:
    proc = config.process
    n = len(config.feasible)
    rows = len(nu)
    if proc.kind == "FP1":
        return np.ones((rows, n), dtype=bool)
    if proc.kind == "FP2":
        q = proc.q
        if proc.mode == "none":
            return _uniform_subsets(rng, rows, n, np.full(rows, q))
        if proc.mode == "with-nu":
            low = nu < config.nu_cut()
            top = np.full(rows, n - q)
            bottom = np.zeros(rows, dtype=int)
            if proc.low_nu_gets == "highest":
                return _window(n, q, np.where(low, top, bottom))
            return _window(n, q, np.where(low, bottom, top))
        base = np.asarray(config.base_prices_cents, dtype=float)
        lo, hi = base.min(), base.max()
        frac = (base[base_idx] - lo) / (hi - lo) if hi > lo else np.zeros(rows)
        start = _round_half_up(1.0 + frac * (n - q)) - 1
        return _window(n, q, start)
    if proc.kind == "UR":
        sizes, probs = zip(*proc.size_law)
        size = rng.choice(np.asarray(sizes), size=rows, p=np.asarray(probs))
        return _uniform_subsets(rng, rows, n, size)
    phi = np.asarray(proc.phi)
    out = rng.random((rows, n)) < phi
    bad = out.sum(axis=1) < proc.kappa
    while bad.any():
        rejections[0] += int(bad.sum())
        if rejections[0] > MAX_REJECTIONS:
            raise RuntimeError("choice-set rejection sampling did not terminate; check phi and kappa")
        out[bad] = rng.random((int(bad.sum()), n)) < phi
        bad = out.sum(axis=1) < proc.kappa
    return out


def draw_choice_set(config: DgpConfig, nu: float, base_price_cents: int, rng: np.random.Generator) -> frozenset:
    """One agent's choice set as alternative indices."""
    base_idx = np.array([list(config.base_prices_cents).index(int(base_price_cents))])
    row = _draw_sets(config, np.array([float(nu)]), base_idx, rng, [0])[0]
    return frozenset(np.nonzero(row)[0].tolist())


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def simulate_dataset(config: DgpConfig) -> Dataset:
    """Draw ``config.n`` records; block ``b`` uses the stream ``(seed, b)``."""
    n_alt = len(config.feasible)
    amounts = config.feasible.amounts
    table = config.price_table()
    mus = np.asarray(config.mu_values)
    parts = {k: [] for k in ("choice", "mu", "base", "nu", "sets")}
    rejections = [0]
    for b, start in enumerate(range(0, config.n, BLOCK_SIZE)):
        rows = min(BLOCK_SIZE, config.n - start)
        rng = stream(config.seed, b)
        base_idx = rng.integers(0, len(config.base_prices_cents), rows)
        mu = mus[rng.integers(0, len(mus), rows)] if len(mus) > 1 else np.full(rows, mus[0])
        nu = config.nu_law.sample(rng, rows)
        sets = _draw_sets(config, nu, base_idx, rng, rejections)
        prices = table[base_idx] / 100.0
        if config.noise_scale is None:
            value = _eu_kernel(mu[:, None], prices, amounts[None, :], nu[:, None])
        else:
            value = _ce_kernel(mu[:, None], prices, amounts[None, :], nu[:, None])
            value = value + config.noise_scale * rng.gumbel(size=(rows, n_alt))
        choice = np.argmax(np.where(sets, value, -np.inf), axis=1)
        parts["choice"].append(choice)
        parts["mu"].append(mu)
        parts["base"].append(base_idx)
        parts["nu"].append(nu)
        parts["sets"].append(sets)
    cat = {k: (np.concatenate(v) if v else np.zeros(0, dtype=np.int64)) for k, v in parts.items()}
    idx = cat["base"].astype(np.int64)
    base = np.asarray(config.base_prices_cents, dtype=np.int64)[idx]
    prices = table[idx]
    sets = cat["sets"].astype(bool).reshape(-1, n_alt)
    return Dataset(
        config.feasible,
        cat["choice"].astype(np.int64),
        cat["mu"].astype(float),
        base,
        prices.reshape(-1, n_alt),
        truth_nu=cat["nu"].astype(float),
        truth_sets=sets,
    )


INJECTION_STREAM = 1 << 20


def inject_dominated(dataset: Dataset, share: float, kappa: int, support=(0.0, 0.03), seed: int = 0) -> Dataset:
    """Make a share of agents choose an alternative that is never first best.

    A selected agent gets an FP2-style set of size ``kappa``: a dominated
    alternative from its own top |D|-kappa+1 plus the kappa-1 alternatives it
    ranks right below. Its choice becomes that dominated alternative. Only
    agents with such an alternative are eligible; the pick uses a stream
    separate from the simulation blocks.
    """
    if dataset.truth_nu is None:
        raise ValueError("injection needs the true nu of every agent")
    if not 0.0 <= share <= 1.0:
        raise ValueError("share must lie in [0, 1]")
    n_alt = dataset.n_alternatives
    if not 1 <= kappa <= n_alt:
        raise ValueError(f"kappa must lie in [1, {n_alt}]")
    ci = dataset.cell_index()
    parts = [rank_partition(c, support) for c in ci.cells]
    top = n_alt - kappa + 1
    target = np.full(len(dataset), -1, dtype=np.int64)
    for c, part in enumerate(parts):
        never = np.setdiff1d(np.arange(n_alt), part.first_best)
        rows = np.nonzero(ci.index == c)[0]
        if never.size == 0 or rows.size == 0:
            continue
        pos = part.positions[part.interval_of(dataset.truth_nu[rows])][:, never]
        best = np.argmin(pos, axis=1)
        ok = pos[np.arange(rows.size), best] < top
        target[rows[ok]] = never[best[ok]]
    eligible = np.nonzero(target >= 0)[0]
    k = int(round(share * len(dataset)))
    if k > eligible.size:
        raise ValueError(f"only {eligible.size} agents can be given a dominated choice, {k} requested")
    pick = np.sort(stream(seed, INJECTION_STREAM).choice(eligible, size=k, replace=False))
    choice = dataset.choice.copy()
    choice[pick] = target[pick]
    sets = None
    if dataset.truth_sets is not None:
        sets = dataset.truth_sets.copy()
        for i in pick:
            ranking = parts[ci.index[i]].rankings[parts[ci.index[i]].interval_of(dataset.truth_nu[i])]
            at = int(np.nonzero(ranking == target[i])[0][0])
            sets[i] = False
            sets[i, ranking[at : at + kappa]] = True
    return Dataset(
        dataset.feasible,
        choice,
        dataset.mu,
        dataset.base_price_cents,
        dataset.price_cents,
        dataset.ids,
        dataset.truth_nu,
        sets,
        dataset.group,
    )


# ---------------------------------------------------------------------------
# Analytic UR / ASR choice probabilities
# ---------------------------------------------------------------------------


def _tail_at_least(phi: NDArray, k: int) -> NDArray:
    """P(sum of independent Bernoulli(phi[..., j]) >= k), batched over leading axes."""
    if k <= 0:
        return np.ones(phi.shape[:-1])
    dist = np.zeros(phi.shape[:-1] + (k + 1,))
    dist[..., 0] = 1.0
    for j in range(phi.shape[-1]):
        p = phi[..., j, None]
        moved = dist * p
        dist = dist * (1 - p)
        dist[..., 1:] += moved[..., :-1]
        dist[..., k] += moved[..., k]  # absorbing "at least k" state
    return dist[..., k]


def interval_choice_probs(process: Process, rankings: NDArray[np.int64]) -> NDArray:
    """Choice probabilities (intervals x alternatives) given each interval's ranking."""
    rankings = np.asarray(rankings)
    I, n = rankings.shape
    pos_prob = np.zeros((I, n))
    if process.kind == "FP1":
        pos_prob[:, 0] = 1.0
    elif process.kind in ("FP2", "UR"):
        if process.kind == "FP2" and process.mode != "none":
            raise ValueError("analytic probabilities need choice sets independent of nu and prices")
        law = ((process.q, 1.0),) if process.kind == "FP2" else process.size_law
        for q, w in law:
            k = np.arange(1, n + 1)
            pos_prob[0] += w * np.array([math.comb(n - kk, q - 1) for kk in k]) / math.comb(n, q)
        pos_prob[:] = pos_prob[0]
    else:
        phi = np.asarray(process.phi)[rankings]
        total = _tail_at_least(phi[:1], process.kappa)[0]
        if total <= 0:
            raise ValueError("choice sets of the required size have zero probability")
        before = np.cumprod(np.concatenate([np.ones((I, 1)), 1 - phi[:, :-1]], axis=1), axis=1)
        for k in range(n):
            tail = _tail_at_least(phi[:, k + 1 :], process.kappa - 1)
            pos_prob[:, k] = phi[:, k] * before[:, k] * tail
        pos_prob /= total
    out = np.zeros((I, n))
    np.put_along_axis(out, rankings, pos_prob, axis=1)
    return out


def ur_asr_choice_probs(process: Process, cell: CovariateCell | RankPartition, beta: BetaSpec) -> NDArray:
    """Per-alternative choice probabilities in one cell, integrating nu exactly over the rank partition."""
    part = cell if isinstance(cell, RankPartition) else rank_partition(cell, beta.support)
    process.validate(part.n_alternatives)
    return beta.masses(part.edges) @ interval_choice_probs(process, part.rankings)


# ---------------------------------------------------------------------------
# Grid maximum likelihood
# ---------------------------------------------------------------------------


class FlatLikelihoodError(ValueError):
    """The likelihood does not discriminate between parameter values."""


@dataclass(frozen=True)
class MLEResult:
    beta: BetaSpec
    loglik: float
    phi: tuple[float, ...] | None = None
    grid_size: int = 0
    history: dict = field(default_factory=dict, repr=False)


class _LikelihoodData:
    def __init__(self, dataset: Dataset, support):
        ci = dataset.cell_index()
        self.counts = dataset.counts().astype(float)
        parts = [rank_partition(c, support) for c in ci.cells]
        self.edges = np.concatenate([p.edges for p in parts])
        sizes = [p.n_intervals for p in parts]
        self.rankings = np.concatenate([p.rankings for p in parts])
        self.starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        offsets = np.concatenate([[0], np.cumsum([s + 1 for s in sizes])[:-1]])
        self.left = np.concatenate([np.arange(o, o + s) for o, s in zip(offsets, sizes)])
        self.cell_of = np.repeat(np.arange(len(parts)), sizes)

    def loglik(self, beta: BetaSpec, interval_probs: NDArray) -> float:
        cdf = beta.cdf(self.edges)
        mass = cdf[self.left + 1] - cdf[self.left]
        P = np.add.reduceat(mass[:, None] * interval_probs, self.starts, axis=0)
        with np.errstate(divide="ignore"):
            logs = np.where(self.counts > 0, np.log(np.maximum(P, 0.0)), 0.0)
        return float((self.counts * logs).sum())


def _beta_at(mf: float, vf: float, support) -> BetaSpec | None:
    lo, hi = support
    w = hi - lo
    mean, var = lo + w * mf, w * w * vf
    if not feasible_moments(mean, var, support):
        return None
    return beta_from_moments(mean, var, support)


def grid_mle_ur_asr(
    dataset: Dataset,
    process: Process,
    support=(0.0, 0.03),
    n_grid: int = 30,
    refine_points: int = 21,
) -> MLEResult:
    """Grid maximum likelihood for the prior (and ASR inclusion probabilities).

    The UR size law or the ASR minimum size ``kappa`` come from ``process``;
    for ASR its ``phi`` serves as the starting value.
    """
    if len(dataset) < MIN_MLE_OBSERVATIONS:
        raise ValueError(f"grid MLE needs at least {MIN_MLE_OBSERVATIONS} observations")
    if np.unique(dataset.choice).size < 2:
        raise FlatLikelihoodError("all records choose the same alternative; the likelihood is flat")
    process.validate(dataset.n_alternatives)
    data = _LikelihoodData(dataset.estimator_view(), support)
    grid = MomentGrid.regular(support, n_grid, n_grid)
    mask = grid.feasible_mask()
    mi, vi = np.nonzero(mask)
    dm, dv = 1.0 / n_grid, MAX_UNIT_VARIANCE / n_grid

    if process.kind == "ASR":
        n_alt = dataset.n_alternatives
        n_obs = float(len(dataset))

        def mean_ll(beta, z):
            # inclusion probabilities in logit coordinates keep the search unconstrained
            pr = Process.asr(special.expit(z), process.kappa)
            try:
                val = data.loglik(beta, interval_choice_probs(pr, data.rankings)) / n_obs
            except ValueError:
                return -_PENALTY
            return val if np.isfinite(val) else -_PENALTY

        def profile(beta, z0):
            res = optimize.minimize(lambda z: -mean_ll(beta, z), z0, method="L-BFGS-B")
            return -res.fun, res.x

        z_start = special.logit(np.clip(np.asarray(process.phi, float), 0.02, 0.98))
        coarse = [(i, j) for i, j in zip(mi, vi)][:: max(1, len(mi) // 150)]
        values = []
        for i, j in coarse:
            beta = _beta_at(grid.mean_fracs[i], grid.var_fracs[j], support)
            ll, z = profile(beta, z_start)
            values.append((ll, z, grid.mean_fracs[i], grid.var_fracs[j]))
        lls = np.array([v[0] for v in values])
        if lls.max() - lls.min() < 1e-12:
            raise FlatLikelihoodError("log-likelihood is constant over the grid")
        ll, z, mf, vf = values[int(np.argmax(lls))]

        def neg_joint(x):
            beta = _beta_at(x[0], x[1], support)
            return _PENALTY if beta is None else -mean_ll(beta, x[2:])

        x0 = np.concatenate([[mf, vf], z])
        bounds = [(1e-4, 1 - 1e-4), (1e-6, MAX_UNIT_VARIANCE)] + [(None, None)] * n_alt
        res = optimize.minimize(neg_joint, x0, method="L-BFGS-B", bounds=bounds)
        if -res.fun > ll:
            mf, vf, z, ll = res.x[0], res.x[1], res.x[2:], -res.fun
        phi = tuple(special.expit(z).tolist())
        return MLEResult(_beta_at(mf, vf, support), ll * n_obs, phi, len(coarse), {"coarse": lls * n_obs})

    probs = interval_choice_probs(process, data.rankings)
    lls = np.array(
        [data.loglik(_beta_at(grid.mean_fracs[i], grid.var_fracs[j], support), probs) for i, j in zip(mi, vi)]
    )
    if lls.max() - lls.min() < 1e-12:
        raise FlatLikelihoodError("log-likelihood is constant over the grid")
    best = int(np.argmax(lls))
    mf, vf, ll = grid.mean_fracs[mi[best]], grid.var_fracs[vi[best]], lls[best]
    fine_m = mf + np.linspace(-dm, dm, refine_points)
    fine_v = vf + np.linspace(-dv, dv, refine_points)
    for a in fine_m:
        for b in fine_v:
            beta = _beta_at(a, b, support)
            if beta is None:
                continue
            val = data.loglik(beta, probs)
            if val > ll:
                mf, vf, ll = a, b, val
    return MLEResult(_beta_at(mf, vf, support), float(ll), None, int(mask.sum()), {"coarse": lls})
