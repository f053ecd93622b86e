import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from choicesets.cli import main, run
from choicesets.core import BetaSpec, FeasibleSet
from choicesets.data import Dataset
from choicesets.io import (
    ConfigError,
    IngestOptions,
    SchemaError,
    cents_to_dollars,
    dollars_to_cents,
    env_overrides,
    ingest_text,
    load_config,
    read_manifest,
    serialize,
)

FS = FeasibleSet((100, 250, 500, 1000))
RULE = (1.6, 1.4, 1.2, 1.0)

GOLDEN = """id,choice,mu,base_price,price_100,price_250,price_500,price_1000
1,250,0.0837,200.00,320.00,280.00,240.00,200.00
2,1000,0.1,187.35,299.76,262.29,224.82,187.35
3,100,0.21,99.99,159.98,139.99,119.99,99.99
"""

TINY = """schema = "choicesets.run/1"
command = "simulate"
seed = 7
threads = 1
out = "sim"

[data]
input = "sim/data.csv"
deductibles = [100, 250, 500, 1000]
multipliers = [1.6, 1.4, 1.2, 1.0]

[model]
kappa = 2
support = [0.0, 0.01]

[grid]
kind = "regular"
n_mean = 8
n_var = 8
extra_points = [[0.004, 0.000004]]

[inference]
bootstrap = 200
instruments = "values"
profile = ["mean"]

[simulation]
process = "FP1"
n = 3000
mu = [0.1]
base_prices_cents = [20000, 30000, 40000, 50000, 60000]
nu_beta = [2.0, 3.0]
"""


class TestMoney:
    @pytest.mark.parametrize(
        "text,cents", [("200", 20000), ("187.35", 18735), ("0.005", 1), ("-1.5", -150), (" 99.99 ", 9999)]
    )
    def test_to_cents(self, text, cents):
        assert dollars_to_cents(text) == cents

    def test_not_a_number(self):
        with pytest.raises(ValueError):
            dollars_to_cents("abc")

    @given(st.integers(-10**9, 10**9))
    def test_round_trip(self, c):
        assert dollars_to_cents(cents_to_dollars(c)) == c


class TestIngest:
    def test_golden(self):
        ds = ingest_text(GOLDEN, IngestOptions(FS))
        assert ds.ids.tolist() == [1, 2, 3]
        assert ds.choice.tolist() == [1, 3, 0]
        assert ds.mu.tolist() == [0.0837, 0.1, 0.21]
        assert ds.base_price_cents.tolist() == [20000, 18735, 9999]
        assert ds.price_cents.tolist() == [
            [32000, 28000, 24000, 20000],
            [29976, 26229, 22482, 18735],
            [15998, 13999, 11999, 9999],
        ]

    def test_rule_consistency(self):
        ds = ingest_text(GOLDEN, IngestOptions(FS, RULE))
        assert len(ds) == 3
        bad = GOLDEN.replace("262.29", "262.40")
        with pytest.raises(SchemaError) as err:
            ingest_text(bad, IngestOptions(FS, RULE))
        assert err.value.rows == [2]

    def test_rule_derived_menu(self):
        text = "id,choice,mu,base_price\n1,500,0.05,150.00\n"
        ds = ingest_text(text, IngestOptions(FS, RULE))
        assert ds.price_cents.tolist() == [[24000, 21000, 18000, 15000]]

    def test_no_prices_no_rule(self):
        with pytest.raises(SchemaError):
            ingest_text("id,choice,mu,base_price\n1,500,0.05,150.00\n", IngestOptions(FS))

    @pytest.mark.parametrize("text", ["", "\n"])
    def test_empty(self, text):
        with pytest.raises(SchemaError):
            ingest_text(text, IngestOptions(FS))

    def test_header_only(self):
        with pytest.raises(SchemaError, match="no data rows"):
            ingest_text(GOLDEN.splitlines()[0] + "\n", IngestOptions(FS))

    def test_missing_column(self):
        with pytest.raises(SchemaError, match="missing columns"):
            ingest_text("id,choice,mu\n1,100,0.1\n", IngestOptions(FS))

    def test_offending_rows_listed(self):
        lines = GOLDEN.splitlines()
        lines[1] = lines[1].replace(",250,", ",300,", 1)
        lines[3] = lines[3].replace(",0.21,", ",1.5,", 1)
        with pytest.raises(SchemaError) as err:
            ingest_text("\n".join(lines) + "\n", IngestOptions(FS))
        assert err.value.rows == [1, 3]
        assert "choice outside the feasible set" in str(err.value)

    def test_duplicate_ids(self):
        with pytest.raises(SchemaError, match="duplicate"):
            ingest_text(GOLDEN.replace("\n3,", "\n2,"), IngestOptions(FS))

    def test_rounding_off_is_exact(self):
        text = GOLDEN.replace("0.0837", "0.08371234567891234")
        ds = ingest_text(text, IngestOptions(FS))
        assert ds.mu[0] == 0.08371234567891234
        assert ds.base_price_cents[1] == 18735

    def test_rounding_on(self):
        ds = ingest_text(GOLDEN, IngestOptions(FS, RULE, round_base=True, round_mu=True))
        assert ds.base_price_cents.tolist() == [20000, 18500, 10000]
        assert ds.mu.tolist() == [0.085, 0.1, 0.21]
        # menus follow the rounded base through the pricing rule
        assert ds.price_cents[1].tolist() == [29600, 25900, 22200, 18500]

    def test_group_column(self):
        text = GOLDEN.replace("price_1000\n", "price_1000,group\n")
        text = "\n".join(line + ",g" if i else line for i, line in enumerate(text.splitlines())) + "\n"
        ds = ingest_text(text, IngestOptions(FS))
        assert ds.group.tolist() == ["g", "g", "g"]


@st.composite
def datasets(draw):
    n = draw(st.integers(1, 25))
    rng = np.random.default_rng(draw(st.integers(0, 2**31 - 1)))
    base = rng.integers(5000, 90000, n)
    prices = np.column_stack([np.round(base * g) for g in RULE]).astype(np.int64)
    mu = rng.uniform(0.001, 0.5, n)
    ids = rng.permutation(10 * n)[:n] + 1
    return Dataset(FS, rng.integers(0, 4, n), mu, base, prices, ids)


class TestRoundTrip:
    @settings(max_examples=40, deadline=None)
    @given(datasets())
    def test_idempotent(self, ds):
        once = ingest_text(serialize(ds), IngestOptions(FS))
        twice = ingest_text(serialize(once), IngestOptions(FS))
        assert serialize(once) == serialize(twice) == serialize(ds)
        for a, b in ((once, ds), (twice, once)):
            assert np.array_equal(a.choice, b.choice)
            assert np.array_equal(a.mu, b.mu)
            assert np.array_equal(a.price_cents, b.price_cents)
            assert np.array_equal(a.ids, b.ids)


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(TINY)
    return path


class TestConfig:
    def test_defaults_and_file(self, tiny):
        cfg = load_config(tiny, environ={})
        assert cfg.command == "simulate" and cfg.seed == 7
        assert cfg.model.kappa == 2 and cfg.grid.n_mean == 8
        assert cfg.inference.alpha == 0.05

    def test_precedence(self, tiny):
        env = {"CHOICESETS_SEED": "11", "CHOICESETS_INFERENCE__BOOTSTRAP": "300", "OTHER_SEED": "1"}
        cfg = load_config(tiny, environ=env)
        assert cfg.seed == 11 and cfg.inference.bootstrap == 300
        cfg = load_config(tiny, {"seed": 12}, environ=env)
        assert cfg.seed == 12

    def test_env_parsing(self):
        env = {"CHOICESETS_MODEL__SUPPORT": "[0.0, 0.02]", "CHOICESETS_COMMAND": "infer"}
        assert env_overrides(env) == {"model": {"support": [0.0, 0.02]}, "command": "infer"}

    def test_schema_mismatch(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('schema = "other/9"\n')
        with pytest.raises(ConfigError, match="schema"):
            load_config(p, environ={})

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[model]\nkapa = 3\n")
        with pytest.raises(ConfigError, match="unknown keys"):
            load_config(p, environ={})

    @pytest.mark.parametrize(
        "override,match",
        [
            ({"model": {"kappa": 1}}, "kappa"),
            ({"inference": {"alpha": 0.5}}, "alpha"),
            ({"command": "estimate"}, "command"),
            ({"model": {"support": [0.01, 0.0]}}, "support"),
            ({"inference": {"profile": ["p25"]}}, "profile"),
        ],
    )
    def test_validation(self, tiny, override, match):
        with pytest.raises(ConfigError, match=match):
            load_config(tiny, override, environ={}).validate()

    def test_identify_needs_data(self, tmp_path):
        cfg = load_config(None, {"command": "identify"}, environ={})
        with pytest.raises(ConfigError, match="needs"):
            cfg.validate()
        p = tmp_path / "c.toml"
        p.write_text('command = "identify"\n[data]\ninput = "missing.csv"\n')
        with pytest.raises(ConfigError, match="not found"):
            load_config(p, environ={}).validate()

    def test_hash_ignores_threads(self, tiny):
        a = load_config(tiny, {"threads": 1}, environ={})
        b = load_config(tiny, {"threads": 8, "out": "elsewhere"}, environ={})
        c = load_config(tiny, {"seed": 8}, environ={})
        assert a.digest() == b.digest() != c.digest()


def files(directory: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.name != "manifest.json"}


def manifest_sans_time(directory: Path) -> dict:
    m = read_manifest(directory)
    m.pop("wall_time_seconds")
    return m


class TestRun:
    def simulate(self, tiny, out):
        return main(["--config", str(tiny), "--out", str(out)])

    def test_simulate_identify_round_trip(self, tiny, tmp_path):
        assert self.simulate(tiny, tmp_path / "sim") == 0
        m = read_manifest(tmp_path / "sim")
        assert m["status"] == "complete" and set(m["outputs"]) == {"config.json", "data.csv", "truth.csv"}
        assert main(["--config", str(tiny), "--command", "identify", "--out", str(tmp_path / "id")]) == 0
        region = (tmp_path / "id" / "region.csv").read_text().splitlines()
        assert region[0] == "E,Var,min_slack,inside"
        # the last row is the extra point: the true Beta(2, 3) on [0, 0.01]
        assert BetaSpec(2.0, 3.0, 0.0, 0.01).moments() == pytest.approx((0.004, 4e-6))
        assert region[-1].startswith("0.004,4e-06,") and region[-1].endswith(",true")

    @pytest.mark.parametrize("command", ["simulate", "identify", "infer", "diagnose"])
    def test_byte_identical_rerun(self, tiny, tmp_path, command):
        self.simulate(tiny, tmp_path / "sim")
        a, b = tmp_path / "a", tmp_path / "b"
        for out, threads in ((a, "1"), (b, "3")):
            assert main(["--config", str(tiny), "--command", command, "--out", str(out), "--threads", threads]) == 0
        assert files(a) == files(b)
        ma, mb = manifest_sans_time(a), manifest_sans_time(b)
        assert ma.pop("threads") == 1 and mb.pop("threads") == 3
        assert ma == mb

    def test_seed_changes_output(self, tiny, tmp_path):
        main(["--config", str(tiny), "--out", str(tmp_path / "a")])
        main(["--config", str(tiny), "--out", str(tmp_path / "b"), "--seed", "8"])
        assert files(tmp_path / "a")["data.csv"] != files(tmp_path / "b")["data.csv"]

    def test_failure_marks_incomplete(self, tiny, tmp_path):
        self.simulate(tiny, tmp_path / "sim")
        data = tmp_path / "sim" / "data.csv"
        lines = data.read_text().splitlines()
        lines[5] = lines[5].replace(",0.1,", ",1.7,", 1)
        data.write_text("\n".join(lines) + "\n")
        out = tmp_path / "bad"
        assert main(["--config", str(tiny), "--command", "infer", "--out", str(out)]) == 1
        m = read_manifest(out)
        assert m["status"] == "incomplete"
        assert "SchemaError" in m["error"] and "rows 5" in m["error"]
        assert list(m["outputs"]) == ["config.json"]

    def test_config_error_exit_code(self, tmp_path, capsys):
        assert main(["--command", "identify", "--out", str(tmp_path / "x")]) == 2
        assert "ConfigError" in capsys.readouterr().err

    def test_run_returns_manifest(self, tiny, tmp_path):
        cfg = load_config(tiny, {"out": str(tmp_path / "r")}, environ={})
        m = run(cfg)
        assert m.status == "complete" and m.config_hash == cfg.digest()
        assert json.loads((tmp_path / "r" / "config.json").read_text())["schema"] == "choicesets.run/1"
