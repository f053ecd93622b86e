"""Choice datasets and deterministic random streams."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray

from .core import CovariateCell, FeasibleSet


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent Philox generator for a (seed, key...) address.

    Work split into numbered blocks or replicates draws from its own stream,
    so results never depend on execution order.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class CellIndex:
    """Distinct covariate cells of a dataset and each record's cell."""

    cells: tuple[CovariateCell, ...]
    index: NDArray[np.int64]

    def __len__(self) -> int:
        return len(self.cells)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Choice records. ``choice`` holds alternative indices into ``feasible``.

    ``truth_nu`` and ``truth_sets`` are simulation ground truth; estimators
    should work on ``estimator_view()`` which drops them.
    """

    feasible: FeasibleSet
    choice: NDArray[np.int64]
    mu: NDArray[np.float64]
    base_price_cents: NDArray[np.int64]
    price_cents: NDArray[np.int64]
    ids: NDArray[np.int64] | None = None
    truth_nu: NDArray[np.float64] | None = None
    truth_sets: NDArray[np.bool_] | None = None
    group: NDArray | None = None
    _cells: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        n = len(self.choice)
        choice = np.asarray(self.choice, dtype=np.int64)
        prices = np.asarray(self.price_cents, dtype=np.int64).reshape(n, len(self.feasible))
        object.__setattr__(self, "choice", choice)
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float))
        object.__setattr__(self, "base_price_cents", np.asarray(self.base_price_cents, dtype=np.int64))
        object.__setattr__(self, "price_cents", prices)
        if self.ids is None:
            object.__setattr__(self, "ids", np.arange(1, n + 1, dtype=np.int64))
        if len(self.mu) != n or len(self.base_price_cents) != n or len(self.ids) != n:
            raise ValueError("all columns must have one entry per record")
        if n and (choice.min() < 0 or choice.max() >= len(self.feasible)):
            raise ValueError("choices must index the feasible set")
        for arr in (self.choice, self.mu, self.base_price_cents, self.price_cents, self.ids):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.choice)

    @property
    def n_alternatives(self) -> int:
        return len(self.feasible)

    def estimator_view(self) -> "Dataset":
        return replace(self, truth_nu=None, truth_sets=None, _cells=[])

    def subset(self, mask: NDArray[np.bool_]) -> "Dataset":
        pick = lambda a: None if a is None else np.asarray(a)[mask]
        return Dataset(
            self.feasible,
            self.choice[mask],
            self.mu[mask],
            self.base_price_cents[mask],
            self.price_cents[mask],
            self.ids[mask],
            pick(self.truth_nu),
            pick(self.truth_sets),
            pick(self.group),
        )

    def cell_index(self) -> CellIndex:
        """Group records by identical (mu, price menu); cells sorted lexicographically."""
        if self._cells:
            return self._cells[0]
        keys = np.column_stack([self.mu, self.price_cents.astype(float)])
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        base = {}
        for i, b in zip(inverse.ravel(), self.base_price_cents):
            base.setdefault(int(i), int(b))
        cells = tuple(
            CovariateCell(self.feasible, float(row[0]), tuple(int(p) for p in row[1:]), base.get(k))
            for k, row in enumerate(uniq)
        )
        out = CellIndex(cells, inverse.ravel().astype(np.int64))
        self._cells.append(out)
        return out

    def counts(self) -> NDArray[np.int64]:
        """Choice counts per (cell, alternative)."""
        ci = self.cell_index()
        out = np.zeros((len(ci), self.n_alternatives), dtype=np.int64)
        np.add.at(out, (ci.index, self.choice), 1)
        return out

    def covariates(self) -> NDArray[np.float64]:
        """(mu, base price in dollars) per record."""
        return np.column_stack([self.mu, self.base_price_cents / 100.0])
