"""End-to-end acceptance checks, one test class per criterion.

Each class records a PASS or FAIL line; the lines are printed together in
the terminal summary. The coverage, pi-bound and law-of-demand checks share
one simulated FP1 dataset built once per module.
"""

import itertools
import json
import math
import os
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from choicesets.cli import main
from choicesets.core import (
    BetaSpec,
    CovariateCell,
    FeasibleSet,
    ThetaPoint,
    containment_probability,
    rank_partition,
    risk_premium,
)
from choicesets.diagnostics import dominance_certificate, law_of_demand_check, rank_order_test
from choicesets.grid import MomentGrid
from choicesets.identification import (
    InequalitySystem,
    PartitionModel,
    TestSetCollection,
    full_support_test_sets,
    generate_test_sets,
    membership_convex,
    membership_enumerate,
    small_sets,
)
from choicesets.inference import (
    Coordinates,
    MomentInequalities,
    as_confidence_set,
    grid_candidates,
    profiled_interval,
    value_cells,
)
from choicesets.mixed_logit import MixedLogitModel, certainty_equivalents, mean_adjacent_gap, noise_scale, realization_table
from choicesets.simulation import DgpConfig, Process, application_cell, inject_dominated, simulate_dataset, ur_asr_choice_probs

from conftest import ACCEPTANCE_LINES, random_cell
from test_diagnostics import planted_dataset
from test_identification import random_beta, selection_probs
from test_mixed_logit import gumbel_top_sets

THREADS = min(8, os.cpu_count() or 1)
SUPPORT = (0.0, 0.01)
TRUTH = BetaSpec(1.0, 1.0, *SUPPORT)
B = 200


@contextmanager
def criterion(number: int, title: str, limit: float | None = None):
    """Record a PASS/FAIL line for one criterion; details go in the yielded dict.

    ``limit`` is a wall-clock budget in seconds for the block.
    """
    info: dict = {}
    start = time.perf_counter()
    try:
        yield info
        if limit is not None:
            assert time.perf_counter() - start < limit, f"over the {limit:.0f}s budget"
    except BaseException:
        status = "FAIL"
        raise
    else:
        status = "PASS"
    finally:
        details = ", ".join(f"{k}={v}" for k, v in info.items())
        ACCEPTANCE_LINES[number] = (
            f"criterion {number:2d} {status}: {title} [{details}] ({time.perf_counter() - start:.1f}s)"
        )


def z_score(estimate: float, p: float, draws: int) -> float:
    se = math.sqrt(max(p * (1 - p), 1e-300) / draws)
    return abs(estimate - p) / se


# ---------------------------------------------------------------------------
# Shared FP1 data: 21 deductibles $50..$1050, n = 20,000, nu ~ 0.01 Beta(1, 1)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def fp1_raw():
    fs = FeasibleSet.evenly_spaced(50, 1050, 50)
    cfg = DgpConfig.reference_design(Process.fp1(), 20_000, seed=3, feasible=fs, nu_law=TRUTH)
    return simulate_dataset(cfg)


def moment_system(ds, kappa, target="gamma", q=None):
    parts = [rank_partition(c, SUPPORT) for c in ds.cell_index().cells]
    ts = generate_test_sets(parts, kappa, target, q)
    sizes = [kappa] if q is None else [kappa, q]
    return MomentInequalities(
        ds.estimator_view(),
        PartitionModel(parts, ts, sizes),
        ts,
        kappa,
        value_cells(ds.base_price_cents),
        B=B,
        seed=1,
        threads=THREADS,
    )


@pytest.fixture(scope="module")
def coverage(fp1_raw):
    grid = MomentGrid.regular(SUPPORT, 50, 50)
    out = {}
    start = time.perf_counter()
    for kappa in (5, 10, 15):
        system = moment_system(fp1_raw, kappa)
        out[kappa] = (system.test(TRUTH), as_confidence_set(system, 0.05, SUPPORT, grid=grid))
    return grid, out, time.perf_counter() - start


# ---------------------------------------------------------------------------


class TestRiskPremia:
    def test_implied_premia(self):
        with criterion(1, "risk premia for a $1000 loss at 10 percent") as info:
            for nu, premium in ((0.00310, 267), (0.00113, 68), (0.00105, 62)):
                got = risk_premium(nu, 1000.0, 0.10)
                info[f"nu={nu}"] = f"{got:.2f}"
                assert abs(got - premium) <= 1.0


class TestSetCounts:
    def test_counts(self):
        with criterion(2, "test-set counts") as info:
            even = rank_partition(CovariateCell.from_rule(FeasibleSet((100, 200, 300, 400, 500)), 0.1, 10_000))
            adjacency = len(generate_test_sets([even], 3))
            info["adjacency"] = adjacency
            assert adjacency == 2 * (3 - 1) == 4

            # 65 application-style cells: 5 claim rates x 13 base premia
            cells = [application_cell(mu, base) for mu in (0.05, 0.06, 0.07, 0.08, 0.09) for base in range(14_000, 38_001, 2_000)]
            parts = [rank_partition(c) for c in cells]
            per_cell = {
                name: [len(generate_test_sets([p], 3, target, q)) for p in parts]
                for name, target, q in (("gamma", "gamma", None), ("pi5", "pi", 5), ("pi4", "pi", 4))
            }
            totals = {name: sum(v) for name, v in per_cell.items()}
            info.update(totals)
            for name, want in (("gamma", 6), ("pi5", 17), ("pi4", 15)):
                assert set(per_cell[name]) == {want}
            assert (len(cells), totals["gamma"], totals["pi5"], totals["pi4"]) == (65, 390, 1105, 975)

            mixed = {n: len(full_support_test_sets(n, 5)) for n in (7, 17)}
            info["mixed"] = f"{mixed[7]}x101={mixed[7] * 101}, {mixed[17]}x101={mixed[17] * 101}"
            assert (mixed[7], mixed[7] * 101) == (98, 9_898)
            assert (mixed[17], mixed[17] * 101) == (3_213, 324_513)


class TestConvexOracle:
    def test_convex_agrees_with_enumeration(self):
        with criterion(3, "convex membership agrees with enumeration", limit=5 * 60) as info:
            rng = np.random.default_rng(3)
            n, kappa = 5, 3
            ts = TestSetCollection(tuple(small_sets(n, kappa)), n)
            agree = {True: 0, False: 0}
            borderline = 0
            worst = 0.0
            while sum(agree.values()) < 200:
                part = rank_partition(random_cell(rng, n_alts=n))
                truth, theta = random_beta(rng), random_beta(rng)
                if rng.random() < 0.5:
                    theta = truth
                P = selection_probs(part, kappa, truth, rng)
                if rng.random() < 0.3:
                    P = rng.dirichlet(np.ones(n))
                m = membership_enumerate(theta, InequalitySystem((part,), P[None, :], ts, kappa))
                if -1e-9 < m.min_slack < 0:
                    borderline += 1  # sign undecidable at the stated tolerance
                    continue
                c = membership_convex(part, kappa, theta, P)
                assert c.inside == m.inside
                if m.inside:
                    worst = max(worst, c.objective)
                    assert c.objective <= 1e-9
                agree[m.inside] += 1
            info.update(inside=agree[True], outside=agree[False], skipped=borderline, max_objective=f"{worst:.1e}")
            assert min(agree.values()) > 0


class TestMixedLogitOracle:
    def test_gumbel_rankings(self):
        with criterion(4, "realization probabilities vs 1e6 Gumbel draws", limit=10 * 60) as info:
            rng = np.random.default_rng(4)
            mc = np.random.default_rng(40)
            draws, n, kappa = 1_000_000, 5, 4
            size = n - kappa + 1
            zs, max_sum_err = [], 0.0
            for _ in range(50):
                cell = random_cell(rng, n_alts=n)
                nu, scale = rng.uniform(0, 0.03), rng.uniform(2, 20)
                ce = certainty_equivalents(cell, nu)
                subsets, table = realization_table(ce, scale, size)
                max_sum_err = max(max_sum_err, abs(table.sum() - 1.0))
                freq = gumbel_top_sets(ce, scale, size, draws, mc)
                Dj = subsets[int(rng.integers(len(subsets)))]
                p = float(table[subsets.index(Dj)])
                zs.append(z_score(freq[sum(1 << d for d in Dj)], p, draws))
            info.update(cells=50, max_z=f"{max(zs):.2f}", max_sum_error=f"{max_sum_err:.1e}")
            assert max(zs) <= 3.0
            assert max_sum_err <= 1e-9


class TestContainmentOracle:
    def test_beta_monte_carlo(self):
        with criterion(5, "containment probabilities vs 1e7 Beta draws", limit=10 * 60) as info:
            rng = np.random.default_rng(5)
            mc = np.random.default_rng(50)
            draws = 10_000_000
            zs = []
            for _ in range(50):
                part = rank_partition(random_cell(rng))
                beta = random_beta(rng)
                q = int(rng.integers(2, 6))
                K = frozenset(rng.choice(5, size=int(rng.integers(1, q)), replace=False).tolist())
                nu = beta.sample(mc, draws)
                top = part.d_star(q)[part.interval_of(nu)]
                est = top[:, sorted(K)].any(axis=1).mean()
                zs.append(z_score(est, containment_probability(part, q, K, beta), draws))
            info.update(cells=50, max_z=f"{max(zs):.2f}")
            assert max(zs) <= 3.0


class TestCoverage:
    def test_truth_accepted_and_nested(self, coverage):
        grid, res, elapsed = coverage
        with criterion(6, "FP1 coverage for kappa 5/10/15 with nesting") as info:
            info["runtime"] = f"{elapsed:.0f}s"
            assert elapsed < 2 * 3600
            i, j = np.nonzero(grid.feasible_mask())
            for kappa, (at_truth, cs) in res.items():
                assert len(cs) == i.size
                info[f"k{kappa}"] = f"T={at_truth.statistic:.2f}<=c={at_truth.critical:.2f},accepted={int(cs.accept.sum())}"
                assert at_truth.accept
            lattice = {(a, b): k for k, (a, b) in enumerate(zip(i, j))}
            for lo, hi in ((5, 10), (10, 15), (5, 15)):
                outer, inner = res[lo][1].accept, res[hi][1].accept
                strays = np.nonzero(inner & ~outer)[0]
                # up to one lattice step from the outer region is boundary resolution
                far = [
                    k
                    for k in strays
                    if not any(
                        outer[lattice[(i[k] + di, j[k] + dj)]]
                        for di, dj in itertools.product((-1, 0, 1), repeat=2)
                        if (i[k] + di, j[k] + dj) in lattice
                    )
                ]
                info[f"{hi}in{lo}"] = f"{len(strays)} outside/{len(far)} beyond"
                assert not far


class TestZeroStatistic:
    def test_some_node_fits_exactly(self, coverage):
        _, res, _ = coverage
        with criterion(7, "some grid node has T_n = 0") as info:
            zeros = {kappa: int((cs.statistic == 0).sum()) for kappa, (_, cs) in res.items()}
            info.update({f"k{k}": v for k, v in zeros.items()})
            assert zeros[5] >= 1


class TestPiBound:
    KAPPA, Q = 5, 21

    def test_clean_accepted_injected_bounded(self, fp1_raw):
        with criterion(8, "pi bound: full sets accepted on clean data, upper bound < 1 after injection") as info:
            clean = moment_system(fp1_raw, self.KAPPA, "pi", self.Q)
            r = clean.test(ThetaPoint(TRUTH, {self.KAPPA: 0.0, self.Q: 1.0}))
            info["clean"] = f"T={r.statistic:.2f}<=c={r.critical:.2f}"
            assert r.accept

            bad = inject_dominated(fp1_raw, 0.15, self.KAPPA, SUPPORT, seed=3)
            info["injected"] = f"{np.mean(bad.choice != fp1_raw.choice):.2f}"
            system = moment_system(bad, self.KAPPA, "pi", self.Q)
            candidates = grid_candidates(MomentGrid.regular(SUPPORT, 10, 10), np.linspace(0, 1, 11))
            iv = profiled_interval(system, "pi", candidates, Coordinates(SUPPORT, (self.KAPPA, self.Q)))
            info.update(interval=f"[{iv.lower:.2f}, {iv.upper:.2f}]", feasible=f"{iv.n_feasible}/{iv.n_candidates}")
            assert not iv.rejected
            assert iv.upper < 1.0


class TestRankOrder:
    def test_ur_and_asr(self):
        with criterion(9, "rank-order property: UR holds, ASR with zero inclusion fails") as info:
            rng = np.random.default_rng(9)
            checked, asr_failed, asr_cells = 0, 0, 0
            while checked < 100:
                part = rank_partition(random_cell(rng))
                triples = [t for t in itertools.permutations(range(5), 3) if t[0] < t[1] and dominance_certificate(part, *t)]
                if not triples:
                    continue
                a, b, c = triples[int(rng.integers(len(triples)))]
                law = dict(zip(range(1, 6), rng.dirichlet(np.ones(5))))
                beta = random_beta(rng)
                v = rank_order_test(ur_asr_choice_probs(Process.ur(law), part, beta), (a, b, c), part)
                assert v.applicable and not v.failed
                checked += 1
                if checked % 10 == 0:
                    phi = [0.0 if k in (a, b) else float(rng.uniform(0.2, 0.9)) for k in range(5)]
                    p = ur_asr_choice_probs(Process.asr(phi), part, beta)
                    asr_cells += 1
                    asr_failed += rank_order_test(p, (a, b, c), part).failed
            info.update(ur_triples=checked, asr=f"{asr_failed}/{asr_cells} fail")
            assert asr_failed == asr_cells == 10


class TestLawOfDemand:
    def test_fp1_and_planted(self, fp1_raw):
        with criterion(10, "law of demand: none on FP1 data, planted reversal found") as info:
            ds = fp1_raw.estimator_view()
            res = law_of_demand_check(ds, value_cells(ds.base_price_cents), SUPPORT)
            info.update(
                price_risk=f"{res.price_risk_significant}/{res.price_risk_comparisons}", region=f"{res.region_significant}/{res.region_comparisons}"
            )
            assert res.price_risk_significant == res.region_significant == 0
            planted, _ = planted_dataset()
            p = law_of_demand_check(planted, value_cells(planted.mu))
            # one planted suffix reversal; its two single-deductible regions nest the wrong way
            info["planted"] = f"price_risk={p.price_risk_significant},region={p.region_significant}"
            assert (p.price_risk_violations, p.price_risk_significant) == (1, 1)
            assert (p.region_violations, p.region_significant) == (2, 2)


CLI_CONFIG = """schema = "choicesets.run/1"
seed = 2024

[data]
input = "sim/data.csv"
deductibles = [100, 250, 500, 750, 1000]
multipliers = [1.5, 1.35, 1.2, 1.1, 1.0]

[model]
kappa = 3
support = [0.0, 0.01]

[grid]
kind = "regular"
n_mean = 10
n_var = 10

[inference]
bootstrap = 200
instruments = "values"
profile = ["mean", "variance"]

[simulation]
process = "FP2"
q = 3
n = 6000
mu = [0.08, 0.12]
base_prices_cents = [20000, 35000, 50000]
nu_beta = [2.0, 2.0]
"""


class TestDeterminism:
    def test_rerun_is_byte_identical(self, tmp_path):
        with criterion(11, "CLI reruns are byte-identical") as info:
            cfg = tmp_path / "run.toml"
            cfg.write_text(CLI_CONFIG)
            assert main(["--config", str(cfg), "--command", "simulate", "--out", str(tmp_path / "sim")]) == 0
            compared = 0
            for command in ("simulate", "identify", "infer", "diagnose"):
                runs = []
                for k, threads in enumerate((1, THREADS)):
                    out = tmp_path / f"{command}{k}"
                    assert main(["--config", str(cfg), "--command", command, "--out", str(out), "--threads", str(threads)]) == 0
                    runs.append(out)
                a, b = ({p.name: p.read_bytes() for p in sorted(Path(r).iterdir())} for r in runs)
                ma, mb = (a.pop("manifest.json"), b.pop("manifest.json"))
                assert a == b
                compared += len(a)
                ja, jb = json.loads(ma), json.loads(mb)
                for j in (ja, jb):
                    j.pop("wall_time_seconds"), j.pop("threads")
                assert ja == jb and ja["status"] == "complete"
            info.update(commands=4, files=compared)


class TestNoiseSensitivity:
    def test_projection_widens(self):
        with criterion(12, "mixed-logit E(nu) projection widens with noise") as info:
            fs = FeasibleSet(tuple(range(100, 1001, 150)))
            bases = tuple(range(1000, 100_001, 5000))
            probe = DgpConfig.reference_design(Process.fp1(), 1, feasible=fs, base_prices_cents=bases)
            gap = mean_adjacent_gap(probe.cells())
            cfg = DgpConfig.reference_design(
                Process.fp1(), 20_000, seed=5, feasible=fs, base_prices_cents=bases, noise_scale=noise_scale(0.10, gap)
            )
            ds = simulate_dataset(cfg)
            cells = ds.cell_index().cells
            ts = full_support_test_sets(7, 5)
            grid = MomentGrid.regular(SUPPORT, 30, 30)
            spans = []
            for frac in (0.10, 0.25, 0.50):
                model = MixedLogitModel(cells, ts, [5], noise_scale(frac, gap), SUPPORT)
                system = MomentInequalities(
                    ds.estimator_view(), model, ts, 5, value_cells(ds.base_price_cents), B=B, seed=1, threads=THREADS
                )
                cs = as_confidence_set(system, 0.05, SUPPORT, grid=grid)
                lo, hi = cs.projection("mean")
                spans.append((lo, hi))
                info[f"{int(frac * 100)}pct"] = f"[{lo:.5f}, {hi:.5f}]"
            for (lo0, hi0), (lo1, hi1) in zip(spans, spans[1:]):
                assert lo1 <= lo0 and hi1 >= hi0
