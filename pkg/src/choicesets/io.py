"""Dataset ingestion, run configuration and deterministic result files."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import platform
from dataclasses import asdict, dataclass, field, fields, replace
from decimal import ROUND_HALF_UP, Decimal, InvalidOperation
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .core import FeasibleSet, _round_half_up
from .data import Dataset

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

SCHEMA_ID = "choicesets.run/1"
ENV_PREFIX = "CHOICESETS_"
PROFILE_TARGETS = ("mean", "variance")
COMMANDS = ("simulate", "identify", "infer", "diagnose")
REQUIRED_COLUMNS = ("id", "choice", "mu", "base_price")
BASE_ROUNDING_CENTS = 500
MU_ROUNDING = 0.005


class SchemaError(ValueError):
    """Input file does not match the expected layout; ``rows`` lists offending data rows."""

    def __init__(self, message: str, rows: Sequence[int] = ()):
        self.rows = list(rows)
        if self.rows:
            shown = ", ".join(str(r) for r in self.rows[:20])
            more = "" if len(self.rows) <= 20 else f" (+{len(self.rows) - 20} more)"
            message = f"{message}; rows {shown}{more}"
        super().__init__(message)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Money and number formatting
# ---------------------------------------------------------------------------


def dollars_to_cents(text: str) -> int:
    """Exact conversion of a decimal dollar string to integer cents (half-up)."""
    try:
        d = Decimal(str(text).strip())
    except InvalidOperation:
        raise ValueError(f"not a number: {text!r}") from None
    if not d.is_finite():
        raise ValueError(f"not a finite amount: {text!r}")
    return int((d * 100).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def cents_to_dollars(cents: int) -> str:
    sign = "-" if cents < 0 else ""
    c = abs(int(cents))
    return f"{sign}{c // 100}.{c % 100:02d}"


def fmt_float(x: float) -> str:
    """Shortest round-tripping text for a float; stable across runs."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x)


def _amount_label(a: float) -> str:
    return f"{a:g}"


def price_column(a: float) -> str:
    return f"price_{_amount_label(a)}"


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IngestOptions:
    """How to read a choice file.

    Without per-alternative price columns the menu comes from the pricing
    rule ``round(g * base + zeta)``; ``multipliers`` must then be given.
    """

    feasible: FeasibleSet
    multipliers: tuple[float, ...] | None = None
    zeta_cents: int = 0
    round_base: bool = False
    round_mu: bool = False


def _round_to(value: int, step: int) -> int:
    return int(_round_half_up(np.array([value / step]))[0]) * step


def ingest(path: str | os.PathLike, options: IngestOptions) -> Dataset:
    """Read a choice CSV: id, choice, mu, base_price, then price_<deductible> columns.

    Amounts are in dollars in the file and integer cents in memory. The
    choice column holds the chosen deductible amount. An optional ``group``
    column is carried along untouched.
    """
    text = Path(path).read_text(encoding="utf-8")
    return ingest_text(text, options)


def ingest_text(text: str, options: IngestOptions) -> Dataset:
    fs = options.feasible
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if not header:
        raise SchemaError("empty file: a header row is required")
    header = [h.strip() for h in header]
    missing = [c for c in REQUIRED_COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"missing columns {missing}")
    col = {h: i for i, h in enumerate(header)}
    price_cols = [price_column(a) for a in fs.amounts]
    have_prices = [c in col for c in price_cols]
    if any(have_prices) and not all(have_prices):
        absent = [c for c, h in zip(price_cols, have_prices) if not h]
        raise SchemaError(f"price columns incomplete, missing {absent}")
    with_prices = all(have_prices)
    g = None
    if options.multipliers is not None:
        g = np.asarray(options.multipliers, float)
        if g.shape != (len(fs),):
            raise ConfigError("one pricing multiplier per deductible is required")
    if not with_prices and g is None:
        raise SchemaError("no price columns and no pricing rule configured")

    ids, choice, mu, base, prices, groups = [], [], [], [], [], []
    bad: list[int] = []
    problems: dict[str, list[int]] = {}

    def fail(kind: str, row: int):
        problems.setdefault(kind, []).append(row)
        bad.append(row)

    for r, rec in enumerate(reader, start=1):
        if not rec or all(not x.strip() for x in rec):
            continue
        if len(rec) != len(header):
            fail("wrong field count", r)
            continue
        try:
            rid = int(rec[col["id"]])
            amount = float(rec[col["choice"]])
            m = float(rec[col["mu"]])
            b = dollars_to_cents(rec[col["base_price"]])
            menu = [dollars_to_cents(rec[col[c]]) for c in price_cols] if with_prices else None
        except ValueError:
            fail("unparseable value", r)
            continue
        try:
            alt = fs.index(amount)
        except KeyError:
            fail("choice outside the feasible set", r)
            continue
        if not 0.0 < m < 1.0:
            fail("mu outside (0, 1)", r)
            continue
        if options.round_mu:
            m = _round_mu(m)
        if options.round_base:
            b = _round_to(b, BASE_ROUNDING_CENTS)
        if g is not None:
            implied = _round_half_up(g * b + options.zeta_cents)
            if menu is None or options.round_base:
                menu = implied.tolist()
            elif np.max(np.abs(implied - np.asarray(menu))) > 1:
                fail("menu inconsistent with the pricing rule", r)
                continue
        if min(menu) < 0:
            fail("negative price", r)
            continue
        ids.append(rid)
        choice.append(alt)
        mu.append(m)
        base.append(b)
        prices.append(menu)
        groups.append(rec[col["group"]] if "group" in col else None)
    if bad:
        kinds = "; ".join(f"{k}: {len(v)}" for k, v in problems.items())
        raise SchemaError(f"invalid records ({kinds})", sorted(bad))
    if not ids:
        raise SchemaError("no data rows")
    if len(set(ids)) != len(ids):
        seen, dup = set(), []
        for i, rid in enumerate(ids, start=1):
            if rid in seen:
                dup.append(i)
            seen.add(rid)
        raise SchemaError("duplicate ids", dup)
    group = np.array(groups, dtype=object) if "group" in col else None
    return Dataset(
        fs,
        np.array(choice, dtype=np.int64),
        np.array(mu, dtype=float),
        np.array(base, dtype=np.int64),
        np.array(prices, dtype=np.int64),
        np.array(ids, dtype=np.int64),
        group=group,
    )


def _round_mu(m: float) -> float:
    """Nearest half percentage point, ties away from zero, kept strictly inside (0, 1)."""
    step = Decimal(repr(MU_ROUNDING))
    q = Decimal(repr(m)) / step
    k = int(q.quantize(Decimal(1), rounding=ROUND_HALF_UP))
    k = min(max(k, 1), int(1 / step) - 1)
    return float(k * step)


def serialize(dataset: Dataset) -> str:
    """CSV text that ``ingest_text`` reads back to the same dataset."""
    fs = dataset.feasible
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    header = list(REQUIRED_COLUMNS) + [price_column(a) for a in fs.amounts]
    if dataset.group is not None:
        header.append("group")
    w.writerow(header)
    for i in range(len(dataset)):
        row = [
            str(int(dataset.ids[i])),
            _amount_label(fs.amounts[dataset.choice[i]]),
            fmt_float(dataset.mu[i]),
            cents_to_dollars(dataset.base_price_cents[i]),
        ] + [cents_to_dollars(p) for p in dataset.price_cents[i]]
        if dataset.group is not None:
            row.append(str(dataset.group[i]))
        w.writerow(row)
    return out.getvalue()


def write_dataset(dataset: Dataset, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_text(serialize(dataset), encoding="utf-8")
    return path


def truth_csv(dataset: Dataset) -> str:
    """Simulation ground truth: each agent's nu and choice set (as deductibles)."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["id", "nu", "choice_set"])
    amounts = dataset.feasible.amounts
    for i in range(len(dataset)):
        members = "" if dataset.truth_sets is None else " ".join(_amount_label(a) for a in amounts[dataset.truth_sets[i]])
        w.writerow([int(dataset.ids[i]), fmt_float(dataset.truth_nu[i]), members])
    return out.getvalue()


def rows_csv(rows: Iterable[Mapping[str, Any]]) -> str:
    """CSV from dict rows with stable float formatting."""
    rows = list(rows)
    out = io.StringIO()
    if not rows:
        return ""
    w = csv.writer(out, lineterminator="\n")
    keys = list(rows[0])
    w.writerow(keys)
    for r in rows:
        w.writerow([_cell(r[k]) for k in keys])
    return out.getvalue()


def _cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return fmt_float(v)
    return str(v)


def canonical_json(obj) -> str:
    """Sorted keys, fixed separators, trailing newline."""
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, allow_nan=True) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    if isinstance(obj, frozenset):
        return sorted(obj)
    return obj


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class DataSection:
    input: str | None = None
    deductibles: list[float] = field(default_factory=lambda: [100.0, 200.0, 250.0, 500.0, 1000.0])
    multipliers: list[float] | None = None
    zeta_cents: int = 0
    round_base: bool = False
    round_mu: bool = False


@dataclass
class ModelSection:
    kappa: int = 3
    support: list[float] = field(default_factory=lambda: [0.0, 0.03])


@dataclass
class GridSection:
    kind: str = "adaptive"
    coarse: int = 50
    levels: int = 2
    n_mean: int = 50
    n_var: int = 50
    extra_points: list[list[float]] = field(default_factory=list)


@dataclass
class InferenceSection:
    alpha: float = 0.05
    bootstrap: int = 1000
    instruments: str = "hypercubes"
    axis_quantiles: int = 8
    variance_reg: float = 0.05
    profile: list[str] = field(default_factory=list)


@dataclass
class SimulationSection:
    process: str = "FP1"
    q: int | None = None
    mode: str = "none"
    size_law: dict[str, float] | None = None
    phi: list[float] | None = None
    asr_kappa: int = 1
    nu_cut: float | None = None
    n: int = 1000
    mu: list[float] = field(default_factory=lambda: [0.085])
    base_prices_cents: list[int] = field(default_factory=lambda: [14000])
    nu_beta: list[float] = field(default_factory=lambda: [1.0, 1.0])
    noise_scale: float | None = None


@dataclass
class DiagnosticsSection:
    band: float = 3.0
    band_rule: str = "separate"


SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "grid": GridSection,
    "inference": InferenceSection,
    "simulation": SimulationSection,
    "diagnostics": DiagnosticsSection,
}


@dataclass
class RunConfig:
    """Resolved run settings; the file layer is TOML with a ``schema`` id."""

    command: str = "simulate"
    seed: int = 0
    threads: int = 1
    out: str = "out"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    grid: GridSection = field(default_factory=GridSection)
    inference: InferenceSection = field(default_factory=InferenceSection)
    simulation: SimulationSection = field(default_factory=SimulationSection)
    diagnostics: DiagnosticsSection = field(default_factory=DiagnosticsSection)
    base_dir: str = field(default=".", repr=False, compare=False)

    def validate(self, check_paths: bool = True) -> "RunConfig":
        if self.command not in COMMANDS:
            raise ConfigError(f"command must be one of {COMMANDS}, got {self.command!r}")
        if self.model.kappa < 2:
            raise ConfigError("kappa must be at least 2")
        if not 0.0 < self.inference.alpha < 0.5:
            raise ConfigError("alpha must lie in (0, 0.5)")
        lo, hi = self.model.support
        if not hi > lo:
            raise ConfigError("support upper bound must exceed the lower bound")
        if self.threads < 1:
            raise ConfigError("threads must be positive")
        if self.grid.kind not in ("adaptive", "regular"):
            raise ConfigError("grid kind must be 'adaptive' or 'regular'")
        if self.inference.instruments not in ("hypercubes", "values"):
            raise ConfigError("instruments must be 'hypercubes' or 'values'")
        unknown = [t for t in self.inference.profile if t not in PROFILE_TARGETS]
        if unknown:
            raise ConfigError(f"profile targets must be among {PROFILE_TARGETS}, got {unknown}")
        if len(self.data.deductibles) > 0 and self.model.kappa > len(self.data.deductibles):
            raise ConfigError("kappa cannot exceed the number of deductibles")
        if self.command != "simulate":
            if not self.data.input:
                raise ConfigError(f"command {self.command!r} needs [data] input")
            if check_paths and not self.input_path().is_file():
                raise ConfigError(f"input file not found: {self.input_path()}")
        return self

    def input_path(self) -> Path:
        p = Path(self.data.input)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def feasible(self) -> FeasibleSet:
        return FeasibleSet(tuple(float(a) for a in self.data.deductibles))

    def ingest_options(self) -> IngestOptions:
        g = tuple(self.data.multipliers) if self.data.multipliers else None
        return IngestOptions(self.feasible(), g, self.data.zeta_cents, self.data.round_base, self.data.round_mu)

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        d["schema"] = SCHEMA_ID
        return d

    def digest(self) -> str:
        """SHA-256 of the canonical settings that shape results (not threads or output path)."""
        d = self.as_dict()
        d.pop("threads")
        d.pop("out")
        return hashlib.sha256(canonical_json(d).encode()).hexdigest()


def _build(cls, values: Mapping[str, Any], where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**values)


def config_from_mapping(raw: Mapping[str, Any], base_dir: str = ".") -> RunConfig:
    raw = dict(raw)
    schema = raw.pop("schema", SCHEMA_ID)
    if schema != SCHEMA_ID:
        raise ConfigError(f"unsupported config schema {schema!r}; expected {SCHEMA_ID!r}")
    sections = {}
    for name, cls in SECTIONS.items():
        sec = raw.pop(name, {})
        if not isinstance(sec, Mapping):
            raise ConfigError(f"[{name}] must be a table")
        sections[name] = _build(cls, sec, f"[{name}]")
    top = _build(RunConfig, raw, "top level") if raw else RunConfig()
    return replace(top, base_dir=str(base_dir), **sections)


def _parse_scalar(text: str):
    """Interpret an override value as a TOML value, else as a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def env_overrides(environ: Mapping[str, str] | None = None, prefix: str = ENV_PREFIX) -> dict:
    """``CHOICESETS_SEED=3`` or ``CHOICESETS_INFERENCE__BOOTSTRAP=200`` style overrides."""
    environ = os.environ if environ is None else environ
    out: dict[str, Any] = {}
    for key in sorted(environ):
        if not key.startswith(prefix):
            continue
        path = key[len(prefix):].lower().split("__")
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = _parse_scalar(environ[key])
    return out


def merge(base: Mapping, extra: Mapping) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(
    path: str | os.PathLike | None = None,
    overrides: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    """File, then environment, then explicit overrides (e.g. command-line flags)."""
    raw: dict = {}
    base_dir = "."
    if path is not None:
        p = Path(path)
        try:
            raw = tomllib.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {p}") from None
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"config file {p} is not valid TOML: {e}") from None
        base_dir = str(p.parent)
    raw = merge(raw, env_overrides(environ))
    raw = merge(raw, overrides or {})
    return config_from_mapping(raw, base_dir)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


def versions() -> dict[str, str]:
    import scipy

    from . import __version__

    return {
        "choicesets": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "scipy": scipy.__version__,
    }


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class Manifest:
    """Written beside the outputs. Everything except ``wall_time_seconds`` is
    a function of the config and seed."""

    command: str
    config_hash: str
    seed: int
    threads: int
    versions: dict
    status: str = "incomplete"
    outputs: dict = field(default_factory=dict)
    error: str | None = None
    wall_time_seconds: float | None = None
    schema: str = SCHEMA_ID

    def write(self, directory: Path) -> Path:
        path = Path(directory) / "manifest.json"
        path.write_text(canonical_json(asdict(self)), encoding="utf-8")
        return path


def read_manifest(directory: str | os.PathLike) -> dict:
    return json.loads((Path(directory) / "manifest.json").read_text(encoding="utf-8"))
