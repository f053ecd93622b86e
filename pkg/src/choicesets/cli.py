"""Command-line entry point: simulate, identify, infer, diagnose."""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import BetaSpec, rank_partition
from .data import Dataset
from .diagnostics import diagnose
from .grid import MomentGrid, adaptive_grid
from .identification import InequalitySystem, PartitionModel, generate_test_sets, region_grid
from .inference import (
    Coordinates,
    InstrumentCells,
    MomentInequalities,
    as_confidence_set,
    build_hypercubes,
    grid_candidates,
    profiled_interval,
    value_cells,
)
from .io import (
    COMMANDS,
    ConfigError,
    Manifest,
    RunConfig,
    canonical_json,
    file_digest,
    ingest,
    load_config,
    rows_csv,
    serialize,
    truth_csv,
    versions,
)
from .simulation import DgpConfig, Process, simulate_dataset


class Outputs:
    """Writes result files and records their digests for the manifest."""

    def __init__(self, directory: Path):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: dict[str, str] = {}

    def text(self, name: str, content: str) -> Path:
        path = self.dir / name
        path.write_text(content, encoding="utf-8")
        self.files[name] = file_digest(path)
        return path


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def _process(cfg: RunConfig) -> Process:
    s = cfg.simulation
    kind = s.process.upper()
    if kind == "FP1":
        return Process.fp1()
    if kind == "FP2":
        return Process.fp2(s.q, s.mode, nu_cut=s.nu_cut)
    if kind == "UR":
        if not s.size_law:
            raise ConfigError("UR needs [simulation] size_law")
        return Process.ur({int(k): float(v) for k, v in s.size_law.items()})
    if kind == "ASR":
        return Process.asr(s.phi or [], s.asr_kappa)
    raise ConfigError(f"unknown process {s.process!r}")


def dgp_config(cfg: RunConfig) -> DgpConfig:
    s = cfg.simulation
    lo, hi = cfg.model.support
    a, b = s.nu_beta
    return DgpConfig(
        feasible=cfg.feasible(),
        mu=tuple(float(m) for m in s.mu),
        base_prices_cents=tuple(int(p) for p in s.base_prices_cents),
        nu_law=BetaSpec(float(a), float(b), float(lo), float(hi)),
        process=_process(cfg),
        n=int(s.n),
        seed=int(cfg.seed),
        multipliers=tuple(cfg.data.multipliers) if cfg.data.multipliers else None,
        zeta_cents=int(cfg.data.zeta_cents),
        noise_scale=s.noise_scale,
    )


def load_dataset(cfg: RunConfig) -> Dataset:
    return ingest(cfg.input_path(), cfg.ingest_options())


def instruments(cfg: RunConfig, ds: Dataset) -> InstrumentCells:
    if cfg.inference.instruments == "values":
        return value_cells(ds.covariates())
    return build_hypercubes(ds.covariates(), cfg.inference.axis_quantiles)


def partitions(cfg: RunConfig, ds: Dataset) -> list:
    support = tuple(cfg.model.support)
    out = []
    for cell in ds.cell_index().cells:
        try:
            out.append(rank_partition(cell, support))
        except Exception as e:
            raise type(e)(f"cell mu={cell.mu}, menu={cell.price_cents}: {e}") from e
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, out: Outputs) -> dict:
    ds = simulate_dataset(dgp_config(cfg))
    out.text("data.csv", serialize(ds))
    out.text("truth.csv", truth_csv(ds))
    return {"records": len(ds), "cells": len(ds.cell_index())}


def cmd_identify(cfg: RunConfig, out: Outputs) -> dict:
    """Plug-in sharp region: sample frequencies treated as choice probabilities."""
    ds = load_dataset(cfg)
    parts = partitions(cfg, ds)
    kappa = cfg.model.kappa
    ts = generate_test_sets(parts, kappa)
    counts = ds.counts()
    system = InequalitySystem(tuple(parts), counts / counts.sum(axis=1, keepdims=True), ts, kappa)
    support = tuple(cfg.model.support)
    extra = [tuple(p) for p in cfg.grid.extra_points]
    if cfg.grid.kind == "regular":
        res = region_grid(MomentGrid.regular(support, cfg.grid.n_mean, cfg.grid.n_var), system)
        if extra:
            res += region_grid((np.array([e for e, _ in extra]), np.array([v for _, v in extra])), system)
    else:

        def evaluate(means, variances):
            rows = region_grid((np.asarray(means), np.asarray(variances)), system)
            return [r.inside for r in rows], rows

        res = adaptive_grid(evaluate, support, cfg.grid.coarse, cfg.grid.levels, extra_points=extra).values
    rows = [{"E": r.mean, "Var": r.variance, "min_slack": r.min_slack, "inside": r.inside} for r in res]
    out.text("region.csv", rows_csv(rows))
    labels = [f"{a:g}" for a in ds.feasible.amounts]
    sets = [{"set": list(K), "provenance": p} for K, p in zip(ts.labelled(labels), ts.provenance)]
    out.text("test_sets.json", canonical_json(sets))
    inside = [r for r in rows if r["inside"]]
    summary = {
        "cells": len(parts),
        "test_sets": len(ts),
        "nodes": len(rows),
        "inside": len(inside),
        "E_range": [min(r["E"] for r in inside), max(r["E"] for r in inside)] if inside else None,
        "Var_range": [min(r["Var"] for r in inside), max(r["Var"] for r in inside)] if inside else None,
    }
    out.text("identify_summary.json", canonical_json(summary))
    return summary


def cmd_infer(cfg: RunConfig, out: Outputs) -> dict:
    ds = load_dataset(cfg)
    parts = partitions(cfg, ds)
    kappa = cfg.model.kappa
    ts = generate_test_sets(parts, kappa)
    inf = cfg.inference
    system = MomentInequalities(
        ds,
        PartitionModel(parts, ts, [kappa]),
        ts,
        kappa,
        instruments(cfg, ds),
        B=inf.bootstrap,
        seed=cfg.seed,
        threads=cfg.threads,
        variance_reg=inf.variance_reg,
    )
    support = tuple(cfg.model.support)
    extra = [tuple(p) for p in cfg.grid.extra_points]
    grid = MomentGrid.regular(support, cfg.grid.n_mean, cfg.grid.n_var)
    if cfg.grid.kind == "regular":
        cs = as_confidence_set(system, inf.alpha, support, grid=grid, extra_points=extra)
    else:
        cs = as_confidence_set(system, inf.alpha, support, coarse=cfg.grid.coarse, levels=cfg.grid.levels, extra_points=extra)
    out.text("confidence_set.csv", rows_csv(cs.rows()))
    summary = {
        "alpha": inf.alpha,
        "bootstrap": inf.bootstrap,
        "instruments": len(system.instruments),
        "test_sets": len(ts),
        "nodes": len(cs),
        "accepted": int(cs.accept.sum()),
        "zero_statistic_nodes": int((cs.statistic == 0).sum()),
        "projection": {"E": list(cs.projection("mean")), "Var": list(cs.projection("variance"))},
        "profiled": {},
    }
    coords = Coordinates(support)
    for target in inf.profile:
        iv = profiled_interval(system, target, grid_candidates(grid), coords, inf.alpha)
        summary["profiled"][target] = asdict(iv)
    out.text("infer_summary.json", canonical_json(summary))
    return summary


def cmd_diagnose(cfg: RunConfig, out: Outputs) -> dict:
    ds = load_dataset(cfg)
    rep = diagnose(ds, instruments(cfg, ds), tuple(cfg.model.support), cfg.model.kappa, cfg.diagnostics.band, cfg.diagnostics.band_rule)
    out.text("diagnostics.json", rep.to_json() + "\n")
    out.text("diagnostics.txt", rep.to_text())
    return {"rationalizable_share": rep.rationalizable_share}


HANDLERS = {
    "simulate": cmd_simulate,
    "identify": cmd_identify,
    "infer": cmd_infer,
    "diagnose": cmd_diagnose,
}


def run(cfg: RunConfig) -> Manifest:
    """Run one command; the manifest is written whether or not it succeeds."""
    cfg.validate()
    out = Outputs(Path(cfg.out))
    manifest = Manifest(cfg.command, cfg.digest(), cfg.seed, cfg.threads, versions())
    # threads and output path do not affect results, so they stay out of the copy
    settings = cfg.as_dict()
    del settings["threads"], settings["out"]
    out.text("config.json", canonical_json(settings))
    start = time.perf_counter()
    try:
        HANDLERS[cfg.command](cfg, out)
        manifest.status = "complete"
    except Exception as e:
        manifest.error = f"{type(e).__name__}: {e}"
        raise
    finally:
        manifest.outputs = dict(sorted(out.files.items()))
        manifest.wall_time_seconds = round(time.perf_counter() - start, 3)
        manifest.write(out.dir)
    return manifest


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="choicesets", description=__doc__)
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--command", choices=COMMANDS, help="pipeline step (overrides the config)")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--threads", type=int, help="worker threads (overrides the config)")
    p.add_argument("--out", help="output directory (overrides the config)")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k != "config" and v is not None}
    try:
        cfg = load_config(args.config, flags)
        run(cfg)
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2 if isinstance(e, ConfigError) else 1
    print(f"{cfg.command}: outputs in {cfg.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
