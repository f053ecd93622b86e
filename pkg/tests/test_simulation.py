import itertools
import math

import numpy as np
import pytest
from scipy import stats

from choicesets.core import BetaSpec, CovariateCell, FeasibleSet, rank_partition
from choicesets.simulation import (
    DgpConfig,
    FlatLikelihoodError,
    Process,
    draw_choice_set,
    grid_mle_ur_asr,
    inject_dominated,
    simulate_dataset,
    ur_asr_choice_probs,
)

from conftest import random_cell

SMALL = FeasibleSet((100, 200, 300, 400, 500))
BASES = tuple(range(4000, 60001, 4000))


def small_config(process, n=20000, seed=1, **kw):
    opts = dict(feasible=SMALL, mu=0.1, base_prices_cents=BASES, nu_law=BetaSpec(1.5, 3.0, 0.0, 0.03))
    opts.update(kw)
    return DgpConfig(process=process, n=n, seed=seed, **opts)


def chosen_positions(ds):
    """Rank of each record's choice in the full ordering at its true nu."""
    prices = ds.price_cents / 100.0
    x = ds.truth_nu[:, None]
    amounts = ds.feasible.amounts[None, :]
    mu = ds.mu[:, None]
    from choicesets.core import _eu_kernel

    u = _eu_kernel(mu, prices, amounts, x)
    order = np.argsort(-u, axis=1)
    return np.argmax(order == ds.choice[:, None], axis=1)


class TestProcessValidation:
    def test_fp2_size(self):
        with pytest.raises(ValueError):
            small_config(Process.fp2(6))
        with pytest.raises(ValueError):
            small_config(Process.fp2(1))

    def test_phi_range(self):
        with pytest.raises(ValueError):
            Process.asr((0.5, 1.2, 0.3, 0.3, 0.3))

    def test_mode(self):
        with pytest.raises(ValueError):
            Process.fp2(3, "sideways")

    def test_size_law(self):
        with pytest.raises(ValueError):
            Process.ur({2: 0.5, 3: 0.6})


class TestDrawChoiceSet:
    def test_fp1_is_everything(self, rng):
        cfg = small_config(Process.fp1())
        assert draw_choice_set(cfg, 0.01, BASES[0], rng) == frozenset(range(5))

    def test_fp2_full_size(self, rng):
        cfg = small_config(Process.fp2(5))
        assert draw_choice_set(cfg, 0.01, BASES[3], rng) == frozenset(range(5))

    def test_with_nu_mapping(self, rng):
        cfg = small_config(Process.fp2(2, "with-nu", nu_cut=0.01))
        assert draw_choice_set(cfg, 0.005, BASES[0], rng) == {3, 4}
        assert draw_choice_set(cfg, 0.02, BASES[0], rng) == {0, 1}
        flipped = small_config(Process.fp2(2, "with-nu", nu_cut=0.01, low_nu_gets="lowest"))
        assert draw_choice_set(flipped, 0.005, BASES[0], rng) == {0, 1}

    def test_with_nu_default_cut_is_median(self):
        cfg = DgpConfig.reference_design(Process.fp2(5, "with-nu"), 10)
        assert cfg.nu_cut() == pytest.approx(0.005)

    def test_with_price_window(self, rng):
        cfg = small_config(Process.fp2(2, "with-price"))
        assert draw_choice_set(cfg, 0.01, BASES[0], rng) == {0, 1}
        assert draw_choice_set(cfg, 0.01, BASES[-1], rng) == {3, 4}
        # start = round_half_up(1 + (p - min)/(max - min) * 3)
        for b in BASES:
            start = math.floor(1 + (b - BASES[0]) / (BASES[-1] - BASES[0]) * 3 + 0.5)
            assert draw_choice_set(cfg, 0.01, b, rng) == {start - 1, start}

    def test_asr_never_terminates(self):
        cfg = small_config(Process.asr((0, 0, 0, 0, 0), kappa=1), n=10)
        with pytest.raises(RuntimeError):
            simulate_dataset(cfg)

    def test_uniform_conditional_law(self):
        cfg = small_config(Process.ur({2: 0.5, 3: 0.5}), n=1_000_000, seed=4)
        sets = simulate_dataset(cfg).truth_sets
        sizes = sets.sum(axis=1)
        codes = sets @ (1 << np.arange(5))
        for q in (2, 3):
            obs = np.bincount(codes[sizes == q], minlength=32)
            expected_codes = [sum(1 << a for a in c) for c in itertools.combinations(range(5), q)]
            counts = obs[expected_codes]
            assert counts.sum() == (sizes == q).sum()
            assert stats.chisquare(counts).pvalue > 1e-3


class TestSimulateDataset:
    def test_reference_design(self):
        cfg = DgpConfig.reference_design(Process.fp1(), 1000, seed=2)
        assert len(cfg.feasible) == 101
        assert cfg.feasible.amounts[0] == 10 and cfg.feasible.amounts[-1] == 1010
        assert cfg.g[0] == pytest.approx(1.990, abs=1e-3)
        ds = simulate_dataset(cfg)
        assert set(np.unique(ds.mu)) == {0.1}
        assert ds.truth_nu.max() <= 0.01

    def test_fp1_choices_are_first_best(self):
        ds = simulate_dataset(small_config(Process.fp1(), n=30000))
        assert np.all(chosen_positions(ds) == 0)

    @pytest.mark.parametrize(
        "process",
        [
            Process.fp2(3),
            Process.fp2(2, "with-nu"),
            Process.fp2(3, "with-price"),
            Process.ur({2: 0.3, 4: 0.7}),
            Process.asr((0.2, 0.9, 0.5, 0.4, 0.7), kappa=2),
        ],
    )
    def test_choice_in_top_set(self, process):
        ds = simulate_dataset(small_config(process, n=30000))
        size = ds.truth_sets.sum(axis=1)
        assert np.all(ds.truth_sets[np.arange(len(ds)), ds.choice])
        assert np.all(chosen_positions(ds) < 5 - size + 1)

    def test_reproducible(self):
        cfg = small_config(Process.ur({3: 1.0}), n=20000, seed=9)
        a, b = simulate_dataset(cfg), simulate_dataset(cfg)
        for col in ("choice", "mu", "base_price_cents", "price_cents", "truth_nu", "truth_sets"):
            assert getattr(a, col).tobytes() == getattr(b, col).tobytes()
        c = simulate_dataset(small_config(Process.ur({3: 1.0}), n=20000, seed=10))
        assert c.choice.tobytes() != a.choice.tobytes()

    def test_prefix_stability(self):
        # blocks use independent streams, so a longer run extends a shorter one
        a = simulate_dataset(small_config(Process.fp1(), n=9000, seed=5))
        b = simulate_dataset(small_config(Process.fp1(), n=20000, seed=5))
        assert np.array_equal(a.choice[:8192], b.choice[:8192])

    def test_estimator_view_hides_truth(self):
        ds = simulate_dataset(small_config(Process.fp1(), n=100))
        view = ds.estimator_view()
        assert view.truth_nu is None and view.truth_sets is None

    def test_mixed_logit_noise(self):
        cfg = small_config(Process.fp1(), n=20000, noise_scale=5.0)
        ds = simulate_dataset(cfg)
        assert np.mean(chosen_positions(ds) > 0) > 0.01


class TestInjection:
    def config(self):
        return small_config(Process.fp1(), n=4000, nu_law=BetaSpec(2.0, 3.0, 0.0, 0.01), base_prices_cents=tuple(range(20000, 80001, 6000)), feasible=FeasibleSet((100, 250, 500, 1000)))

    def test_deterministic_and_seeded(self):
        raw = simulate_dataset(self.config())
        a = inject_dominated(raw, 0.1, 2, (0.0, 0.01), seed=5)
        b = inject_dominated(raw, 0.1, 2, (0.0, 0.01), seed=5)
        c = inject_dominated(raw, 0.1, 2, (0.0, 0.01), seed=6)
        assert np.array_equal(a.choice, b.choice)
        assert not np.array_equal(a.choice, c.choice)
        assert (a.choice != raw.choice).sum() == 400

    def test_zero_share(self):
        raw = simulate_dataset(self.config())
        assert np.array_equal(inject_dominated(raw, 0.0, 2, (0.0, 0.01)).choice, raw.choice)

    def test_needs_truth(self):
        raw = simulate_dataset(self.config())
        with pytest.raises(ValueError):
            inject_dominated(raw.estimator_view(), 0.1, 2, (0.0, 0.01))

    def test_too_few_eligible(self):
        raw = simulate_dataset(self.config())
        with pytest.raises(ValueError, match="can be given"):
            inject_dominated(raw, 0.95, 2, (0.0, 0.01))


class TestAnalyticProbabilities:
    def test_two_alternatives_full_sets(self):
        cell = CovariateCell(FeasibleSet((200, 500)), 0.1, (8000, 5000))
        beta = BetaSpec(2, 2)
        assert ur_asr_choice_probs(Process.ur(2), cell, beta) == pytest.approx(ur_asr_choice_probs(Process.fp1(), cell, beta))

    def test_sums_to_one(self, rng):
        beta = BetaSpec(1.3, 2.0)
        for _ in range(10):
            cell = random_cell(rng)
            for proc in (Process.ur({1: 0.2, 3: 0.8}), Process.asr(rng.uniform(0.1, 1, 5), kappa=3)):
                assert ur_asr_choice_probs(proc, cell, beta).sum() == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize(
        "process",
        [Process.ur({2: 0.5, 4: 0.5}), Process.asr((0.3, 0.8, 0.5, 0.6, 0.9), kappa=2), Process.fp2(3)],
    )
    def test_matches_simulation(self, process):
        beta = BetaSpec(1.5, 3.0)
        cfg = small_config(process, n=1_000_000, seed=8, base_prices_cents=(20000,))
        ds = simulate_dataset(cfg)
        freq = np.bincount(ds.choice, minlength=5) / len(ds)
        p = ur_asr_choice_probs(process, cfg.cells()[0], beta)
        se = np.sqrt(np.maximum(p * (1 - p), 1e-12) / len(ds))
        assert np.all(np.abs(freq - p) <= 3 * se + 1e-12)

    def test_ur_rank_order_property(self, rng):
        """UR: a dominated alternative is chosen less often than the two that dominate it."""
        beta = BetaSpec(1.2, 2.5)
        proc = Process.ur({2: 0.3, 3: 0.4, 5: 0.3})
        found = 0
        while found < 100:
            cell = random_cell(rng)
            part = rank_partition(cell)
            pos = part.positions
            for a, b, c in itertools.permutations(range(5), 3):
                if a < b and np.all(pos[:, c] > np.minimum(pos[:, a], pos[:, b])):
                    p = ur_asr_choice_probs(proc, part, beta)
                    assert p[a] + p[b] > p[c]
                    found += 1
                    break

    def test_asr_violates_rank_order(self, app_cell):
        part = rank_partition(app_cell)
        beta = BetaSpec(1.5, 4.0)
        # $200 (index 1) is dominated by $100 or $250 everywhere
        assert np.all(part.positions[:, 1] > np.minimum(part.positions[:, 0], part.positions[:, 2]))
        p = ur_asr_choice_probs(Process.asr((0.0, 1.0, 0.0, 0.5, 0.5), kappa=1), part, beta)
        assert p[0] + p[2] == 0.0
        assert p[1] > p[0] + p[2]


class TestGridMLE:
    def test_too_small(self):
        ds = simulate_dataset(small_config(Process.ur(3), n=500))
        with pytest.raises(ValueError):
            grid_mle_ur_asr(ds, Process.ur(3))

    def test_degenerate(self):
        cfg = small_config(Process.fp2(2, "with-nu", nu_cut=1.0), n=2000, base_prices_cents=(60000,))
        ds = simulate_dataset(cfg)
        assert np.unique(ds.choice).size == 1
        with pytest.raises(FlatLikelihoodError):
            grid_mle_ur_asr(ds, Process.ur(2))

    @pytest.mark.slow
    def test_ur_recovery(self):
        truth = BetaSpec(1.5, 3.0, 0.0, 0.03)
        proc = Process.ur({2: 0.5, 5: 0.5})
        ds = simulate_dataset(small_config(proc, n=100_000, seed=12))
        res = grid_mle_ur_asr(ds, proc, n_grid=30)
        m0, v0 = truth.moments()
        m1, v1 = res.beta.moments()
        assert abs(m1 - m0) / 0.03 <= 1 / 30
        assert abs(v1 - v0) / 0.03**2 <= 0.25 / 30

    @pytest.mark.slow
    def test_asr_recovery(self):
        phi = (0.3, 0.8, 0.5, 0.6, 0.9)
        proc = Process.asr(phi, kappa=2)
        ds = simulate_dataset(small_config(proc, n=100_000, seed=13))
        res = grid_mle_ur_asr(ds, Process.asr((0.5,) * 5, kappa=2), n_grid=12)
        assert np.max(np.abs(np.array(res.phi) - phi)) <= 0.05
