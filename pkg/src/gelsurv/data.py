"""Observed-sample container, CSV ingestion and standardization.

The outcome ``y`` is the log of the observed time ``min(T, C)`` and
``delta`` flags uncensored rows. Arrays inside a :class:`Dataset` are
read-only so a dataset can be shared freely between workers.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ParseError, SchemaError, ValidationError

__all__ = ["Dataset", "Schema", "ScalingRecord", "load_csv", "save_csv", "standardize"]


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Dataset:
    """Observed sample ``(Y, delta, A, Z, X)``.

    Parameters
    ----------
    y : ndarray of shape (n,)
        Log observed time.
    delta : ndarray of shape (n,)
        Event indicator, 1 for an observed event and 0 for censoring.
    a : ndarray of shape (n,)
        Exposure.
    z : ndarray of shape (n, m)
        Candidate instruments.
    x : ndarray of shape (n, d_x)
        Baseline covariates; ``d_x`` may be zero.
    """

    y: np.ndarray
    delta: np.ndarray
    a: np.ndarray
    z: np.ndarray
    x: np.ndarray
    a_name: str = "a"
    z_names: tuple[str, ...] = field(default=())
    x_names: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        y = _frozen(np.asarray(self.y, dtype=float).reshape(-1))
        delta = _frozen(np.asarray(self.delta, dtype=float).reshape(-1))
        a = _frozen(np.asarray(self.a, dtype=float).reshape(-1))
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        n = y.shape[0]
        x = np.asarray(self.x, dtype=float)
        if x.size == 0:
            x = np.empty((n, 0))
        elif x.ndim == 1:
            x = x[:, None]
        z, x = _frozen(z), _frozen(x)

        if n < 2:
            raise ValidationError(f"n >= 2 required, got n={n}")
        for name, arr in (("delta", delta), ("a", a), ("z", z), ("x", x)):
            if arr.shape[0] != n:
                raise ValidationError(
                    f"row count mismatch: y has {n} rows, {name} has {arr.shape[0]}"
                )
        if z.shape[1] < 1:
            raise ValidationError("at least one instrument column is required")
        for name, arr in (("y", y), ("delta", delta), ("a", a), ("z", z), ("x", x)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"non-finite entries in {name}")
        bad = np.flatnonzero((delta != 0.0) & (delta != 1.0))
        if bad.size:
            raise ValidationError(
                f"delta must be 0 or 1; row {bad[0] + 1} has value {delta[bad[0]]:g}"
            )

        z_names = tuple(self.z_names) or tuple(f"z{j + 1}" for j in range(z.shape[1]))
        x_names = tuple(self.x_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if len(z_names) != z.shape[1] or len(x_names) != x.shape[1]:
            raise ValidationError("column names do not match array widths")

        for attr, value in (
            ("y", y), ("delta", delta), ("a", a), ("z", z), ("x", x),
            ("z_names", z_names), ("x_names", x_names),
        ):
            object.__setattr__(self, attr, value)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def m(self) -> int:
        return self.z.shape[1]

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    @property
    def censored(self) -> bool:
        """Whether any observation is censored."""
        return bool(np.any(self.delta == 0.0))

    @property
    def zx(self) -> np.ndarray:
        """Instruments and covariates stacked column-wise."""
        return np.hstack([self.z, self.x])

    def columns(self, selection: Sequence[str]) -> np.ndarray:
        """Stack columns of ``O_A = (A, Z, X)`` by name.

        The group tokens ``"a"``, ``"z"`` and ``"x"`` expand to every
        column of that group; any other entry must be a column name.
        """
        blocks = []
        lookup = {self.a_name: self.a}
        lookup.update({nm: self.z[:, j] for j, nm in enumerate(self.z_names)})
        lookup.update({nm: self.x[:, j] for j, nm in enumerate(self.x_names)})
        for token in selection:
            if token == "a":
                blocks.append(self.a[:, None])
            elif token == "z":
                blocks.append(self.z)
            elif token == "x":
                blocks.append(self.x)
            elif token in lookup:
                blocks.append(lookup[token][:, None])
            else:
                raise SchemaError(f"unknown conditioning column {token!r}")
        if not blocks:
            return np.empty((self.n, 0))
        return np.hstack(blocks)


@dataclass(frozen=True)
class Schema:
    """Roles of the CSV columns."""

    outcome: str
    event: str
    exposure: str
    instruments: tuple[str, ...]
    covariates: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "instruments", tuple(self.instruments))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if not self.instruments:
            raise SchemaError("schema must name at least one instrument column")

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, object]) -> "Schema":
        def as_tuple(value: object) -> tuple[str, ...]:
            if value is None:
                return ()
            if isinstance(value, str):
                return tuple(s.strip() for s in value.split(",") if s.strip())
            return tuple(str(v) for v in value)  # type: ignore[union-attr]

        try:
            return cls(
                outcome=str(mapping["outcome"]),
                event=str(mapping["event"]),
                exposure=str(mapping["exposure"]),
                instruments=as_tuple(mapping["instruments"]),
                covariates=as_tuple(mapping.get("covariates")),
            )
        except KeyError as exc:
            raise SchemaError(f"schema is missing the {exc.args[0]!r} role") from None


def load_csv(path: str | Path, schema: Schema | Mapping[str, object]) -> Dataset:
    """Read a comma-delimited file with a header row into a :class:`Dataset`.

    Row numbers in error messages count data rows from 1, so the first
    line after the header is row 1.
    """
    if not isinstance(schema, Schema):
        schema = Schema.from_mapping(schema)
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path} is empty; a header row is required") from None
        rows = [r for r in reader if r and any(cell.strip() for cell in r)]

    wanted = [schema.outcome, schema.event, schema.exposure, *schema.instruments,
              *schema.covariates]
    index = {}
    for name in wanted:
        if name not in header:
            raise SchemaError(f"column {name!r} not found in {path}")
        index[name] = header.index(name)

    values = np.empty((len(rows), len(wanted)))
    for r, row in enumerate(rows, start=1):
        for c, name in enumerate(wanted):
            k = index[name]
            cell = row[k].strip() if k < len(row) else ""
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(
                    f"row {r}, column {name!r}: cannot parse {cell!r} as a number",
                    row=r, column=name,
                ) from None
            if not math.isfinite(v):
                raise ParseError(f"row {r}, column {name!r}: non-finite value {cell!r}",
                                 row=r, column=name)
            values[r - 1, c] = v

    if values.shape[0] < 2:
        raise ValidationError(f"n >= 2 required, file has {values.shape[0]} data row(s)")

    m = len(schema.instruments)
    return Dataset(
        y=values[:, 0],
        delta=values[:, 1],
        a=values[:, 2],
        z=values[:, 3:3 + m],
        x=values[:, 3 + m:],
        a_name=schema.exposure,
        z_names=schema.instruments,
        x_names=schema.covariates,
    )


def save_csv(ds: Dataset, path: str | Path, outcome: str = "y", event: str = "delta") -> Schema:
    """Write ``ds`` with a header row; returns the schema that reads it back.

    Values are written with ``repr`` precision so the round trip is exact.
    """
    schema = Schema(outcome, event, ds.a_name, ds.z_names, ds.x_names)
    cols = [ds.y, ds.delta, ds.a, *ds.z.T, *ds.x.T]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([outcome, event, ds.a_name, *ds.z_names, *ds.x_names])
        for row in zip(*cols):
            writer.writerow([repr(float(v)) for v in row])
    return schema


@dataclass(frozen=True)
class ScalingRecord:
    """Centers and spreads used by :func:`standardize`."""

    a_center: float
    a_spread: float
    z_center: np.ndarray
    z_spread: np.ndarray
    x_center: np.ndarray
    x_spread: np.ndarray

    def invert(self, ds: Dataset) -> Dataset:
        """Map a standardized dataset back to the original scale."""
        return Dataset(
            y=ds.y, delta=ds.delta,
            a=ds.a * self.a_spread + self.a_center,
            z=ds.z * self.z_spread + self.z_center,
            x=ds.x * self.x_spread + self.x_center,
            a_name=ds.a_name, z_names=ds.z_names, x_names=ds.x_names,
        )


def _center_spread(col: np.ndarray, name: str) -> tuple[float, float]:
    center = float(np.mean(col))
    spread = float(np.std(col))
    if not spread > 1e-12 * max(1.0, abs(center)):
        raise ValidationError(f"column {name!r} is constant and cannot be standardized")
    return center, spread


def standardize(ds: Dataset) -> tuple[Dataset, ScalingRecord]:
    """Center and scale ``a``, ``z`` and ``x`` to mean 0 and unit variance.

    The spread is the population standard deviation (divisor ``n``).
    ``y`` and ``delta`` pass through unchanged.
    """
    a_c, a_s = _center_spread(ds.a, ds.a_name)
    z_cs = np.array([_center_spread(ds.z[:, j], nm) for j, nm in enumerate(ds.z_names)])
    x_cs = np.array([_center_spread(ds.x[:, j], nm) for j, nm in enumerate(ds.x_names)])
    x_cs = x_cs.reshape(-1, 2)
    rec = ScalingRecord(
        a_center=a_c, a_spread=a_s,
        z_center=z_cs[:, 0], z_spread=z_cs[:, 1],
        x_center=x_cs[:, 0], x_spread=x_cs[:, 1],
    )
    out = Dataset(
        y=ds.y, delta=ds.delta,
        a=(ds.a - a_c) / a_s,
        z=(ds.z - rec.z_center) / rec.z_spread,
        x=(ds.x - rec.x_center) / rec.x_spread,
        a_name=ds.a_name, z_names=ds.z_names, x_names=ds.x_names,
    )
    return out, rec
