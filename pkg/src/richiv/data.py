"""Validated dataset and regressor-specification types shared by all estimators.

A :class:`Dataset` holds the outcome, a binary treatment, a binary
instrument, a covariate matrix, and optional cluster ids.  All arrays are
float64 (int64 for clusters), validated on construction, and frozen so
they can be shared across workers without copies.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import (
    EmptyData,
    NonBinaryColumn,
    NonFinite,
    RaggedColumns,
    RankDeficient,
)

__all__ = [
    "Dataset",
    "RegressorSpec",
    "Column",
    "ComplierType",
    "validate",
    "build_regressors",
    "read_csv",
    "write_csv",
    "to_table",
]

# Relative singular-value cutoff below which a design matrix is treated as
# rank deficient.
RANK_TOL = 1e-10


class ComplierType(IntEnum):
    """Sub-population label derived from the potential treatments."""

    NEVER_TAKER = 0
    COMPLIER = 1
    ALWAYS_TAKER = 2

    @classmethod
    def from_potential(cls, t0: int, t1: int) -> "ComplierType":
        """Map potential treatments (t(0), t(1)) to a label; defiers are forbidden."""
        pair = (int(t0), int(t1))
        if pair == (0, 0):
            return cls.NEVER_TAKER
        if pair == (0, 1):
            return cls.COMPLIER
        if pair == (1, 1):
            return cls.ALWAYS_TAKER
        raise ValueError(f"defier pattern t(0)={t0}, t(1)={t1} is not allowed")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Dataset:
    """Estimation input: outcome, binary treatment/instrument, covariates.

    Attributes
    ----------
    y : (n,) float64
        Outcome.
    t : (n,) float64
        Treatment, every entry exactly 0.0 or 1.0.
    z : (n,) float64
        Instrument, every entry exactly 0.0 or 1.0.
    C : (n, d) float64
        Covariate matrix (d may be 0).
    cluster : (n,) int64 or None
        Cluster ids re-indexed to 0..G-1, or None.
    """

    y: np.ndarray
    t: np.ndarray
    z: np.ndarray
    C: np.ndarray
    cluster: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d(self) -> int:
        return self.C.shape[1]

    @property
    def n_clusters(self) -> int:
        if self.cluster is None:
            return 0
        return int(self.cluster.max()) + 1 if self.cluster.size else 0


def _check_binary(name: str, v: np.ndarray) -> None:
    bad = np.flatnonzero((v != 0.0) & (v != 1.0))
    if bad.size:
        raise NonBinaryColumn(
            f"column {name!r} has non-binary value {v[bad[0]]!r} at row {bad[0]}",
            column=name,
            rows=bad.tolist(),
        )


def make_dataset(
    y: np.ndarray,
    t: np.ndarray,
    z: np.ndarray,
    C: np.ndarray,
    cluster: np.ndarray | None = None,
) -> Dataset:
    """Build a validated :class:`Dataset` from raw arrays."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    C = np.asarray(C, dtype=np.float64)
    if C.ndim == 1:
        C = C.reshape(-1, 1)
    n = y.shape[0]
    if n == 0:
        raise EmptyData("dataset has no rows")
    lengths = {"y": n, "t": t.shape[0], "z": z.shape[0], "C": C.shape[0]}
    if cluster is not None:
        cluster = np.asarray(cluster)
        lengths["cluster"] = cluster.shape[0]
    if len(set(lengths.values())) != 1:
        raise RaggedColumns(f"column lengths differ: {lengths}", lengths=lengths)
    for name, v in (("y", y), ("t", t), ("z", z), ("C", C)):
        if not np.isfinite(v).all():
            raise NonFinite(f"column {name!r} contains non-finite values", column=name)
    _check_binary("t", t)
    _check_binary("z", z)
    if cluster is not None:
        cf = np.asarray(cluster, dtype=np.float64)
        if not np.isfinite(cf).all():
            raise NonFinite("column 'cluster' contains non-finite values", column="cluster")
        if not np.all(cf == np.round(cf)):
            raise NonFinite("column 'cluster' must contain integers", column="cluster")
        # arbitrary integer ids are re-indexed to 0..G-1
        _, cluster = np.unique(cf.astype(np.int64), return_inverse=True)
        cluster = _frozen(cluster.astype(np.int64))
    return Dataset(y=_frozen(y), t=_frozen(t), z=_frozen(z), C=_frozen(C), cluster=cluster)


def validate(table: Mapping[str, Sequence[float]]) -> Dataset:
    """Validate a column table into a :class:`Dataset`.

    The table must contain columns ``y``, ``t``, ``z``, covariates named
    ``c1``..``cd`` (consecutively numbered from 1), and optionally
    ``cluster``.
    """
    missing = [k for k in ("y", "t", "z") if k not in table]
    if missing:
        raise RaggedColumns(f"missing required columns: {missing}", missing=missing)
    d = 0
    while f"c{d + 1}" in table:
        d += 1
    known = {"y", "t", "z", "cluster"} | {f"c{j + 1}" for j in range(d)}
    extra = sorted(set(table) - known)
    if extra:
        raise RaggedColumns(
            f"unexpected columns {extra}; covariates must be named c1..cd",
            extra=extra,
        )
    y = np.asarray(table["y"], dtype=np.float64)
    n = y.shape[0]
    if d:
        C = np.column_stack([np.asarray(table[f"c{j + 1}"], dtype=np.float64) for j in range(d)])
    else:
        C = np.empty((n, 0), dtype=np.float64)
    cluster = np.asarray(table["cluster"]) if "cluster" in table else None
    return make_dataset(y, table["t"], table["z"], C, cluster)


def to_table(ds: Dataset) -> dict[str, np.ndarray]:
    """Serialize a dataset back into the column-table form accepted by :func:`validate`."""
    out: dict[str, np.ndarray] = {"y": ds.y, "t": ds.t, "z": ds.z}
    for j in range(ds.d):
        out[f"c{j + 1}"] = ds.C[:, j]
    if ds.cluster is not None:
        out["cluster"] = ds.cluster
    return out


# --- regressor specification ---------------------------------------------


@dataclass(frozen=True)
class Column:
    """One regressor column: a named transform of the covariate matrix."""

    name: str
    fn: Callable[[np.ndarray], np.ndarray]

    def __call__(self, C: np.ndarray) -> np.ndarray:
        return np.asarray(self.fn(C), dtype=np.float64).reshape(-1)


def identity_columns(d: int) -> tuple[Column, ...]:
    """The d coordinate transforms c -> c_j."""
    return tuple(
        Column(f"c{j + 1}", (lambda C, j=j: C[:, j])) for j in range(d)
    )


@dataclass(frozen=True)
class RegressorSpec:
    """Which functions of the covariates enter the estimating equation.

    ``columns=None`` means the d identity coordinates.  The produced design
    must have full column rank on the dataset; this is checked at
    estimation time by :func:`build_regressors`.
    """

    include_intercept: bool = True
    columns: tuple[Column, ...] | None = None

    def resolve(self, d: int) -> tuple[Column, ...]:
        return identity_columns(d) if self.columns is None else self.columns

    def labels(self, d: int) -> tuple[str, ...]:
        names = tuple(col.name for col in self.resolve(d))
        return (("const",) + names) if self.include_intercept else names


def design_matrix(C: np.ndarray, spec: RegressorSpec, check_rank: bool = True) -> np.ndarray:
    """Evaluate a regressor spec on a covariate matrix (no dataset required)."""
    n = C.shape[0]
    cols = []
    if spec.include_intercept:
        cols.append(np.ones(n))
    for col in spec.resolve(C.shape[1]):
        v = col(C)
        if v.shape[0] != n:
            raise RaggedColumns(
                f"transform {col.name!r} returned {v.shape[0]} values for {n} rows",
                column=col.name,
            )
        if not np.isfinite(v).all():
            raise NonFinite(f"transform {col.name!r} produced non-finite values", column=col.name)
        cols.append(v)
    R = np.column_stack(cols) if cols else np.empty((n, 0))
    if check_rank and R.shape[1] > 0:
        s = np.linalg.svd(R, compute_uv=False)
        if s[-1] < RANK_TOL * s[0]:
            raise RankDeficient(
                f"regressor matrix is rank deficient (smallest/largest singular value "
                f"= {s[-1] / s[0]:.3e})",
                singular_values=s.tolist(),
            )
    return R


def build_regressors(ds: Dataset, spec: RegressorSpec | None = None) -> np.ndarray:
    """Build the n x (k + intercept) regressor matrix for a dataset.

    Column order is deterministic: intercept first (when included), then
    the declared transforms in order.
    """
    return design_matrix(ds.C, spec or RegressorSpec())


# --- CSV interface ---------------------------------------------------------

# Header layout: y,t,z then c1..cd in order, optional trailing cluster.


def read_csv(path: str | Path) -> Dataset:
    """Read a dataset from CSV (header required, '.' decimal separator)."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyData(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        d = len(header) - 3
        has_cluster = bool(header) and header[-1] == "cluster"
        if has_cluster:
            d -= 1
        expected = ["y", "t", "z"] + [f"c{j + 1}" for j in range(max(d, 0))]
        if has_cluster:
            expected.append("cluster")
        if d < 0 or header != expected:
            raise RaggedColumns(
                f"{path}: header must be y,t,z,c1..cd[,cluster]; got {header}",
                header=header,
            )
        columns: list[list[float]] = [[] for _ in header]
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise RaggedColumns(
                    f"{path}: row {rownum} has {len(row)} fields, expected {len(header)}",
                    row=rownum,
                )
            for j, cell in enumerate(row):
                try:
                    columns[j].append(float(cell))
                except ValueError:
                    raise NonFinite(
                        f"{path}: row {rownum}, column {header[j]!r}: "
                        f"cannot parse {cell!r} as a number",
                        row=rownum,
                        column=header[j],
                    ) from None
    table = dict(zip(header, columns))
    return validate(table)


def write_csv(ds: Dataset, path: str | Path) -> None:
    """Write a dataset as CSV with 17 significant digits (exact float round trip)."""
    path = Path(path)
    header = ["y", "t", "z"] + [f"c{j + 1}" for j in range(ds.d)]
    if ds.cluster is not None:
        header.append("cluster")
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(ds.n):
            row = [f"{ds.y[i]:.17g}", f"{ds.t[i]:.17g}", f"{ds.z[i]:.17g}"]
            row += [f"{ds.C[i, j]:.17g}" for j in range(ds.d)]
            if ds.cluster is not None:
                row.append(str(int(ds.cluster[i])))
            writer.writerow(row)
