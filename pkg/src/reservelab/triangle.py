"""Run-off triangle data model and file I/O.

A triangle holds payment amounts indexed by occurrence period ``i`` (rows)
and development period ``j`` (columns), both 1-based and running to
``n_periods``. Exactly the cells with ``i + j <= n_periods + 1`` are
observed; everything below that antidiagonal is missing and will be
predicted by the reserving models.

Triangles are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import io
import re
from dataclasses import dataclass

import numpy as np

from .errors import KindMismatchError, TriangleFormatError

INCREMENTAL = "incremental"
CUMULATIVE = "cumulative"

Cell = tuple[int, int]

_HEADER_RE = re.compile(r"^I\s*=\s*(\d+)\s*$")


@dataclass(frozen=True)
class Triangle:
    """Square run-off triangle of payment amounts.

    Parameters
    ----------
    values : ndarray of shape (I, I)
        Amounts for observed cells; NaN everywhere below the antidiagonal.
    kind : str
        Either ``"incremental"`` (per-period payments) or ``"cumulative"``
        (running row sums).
    """

    values: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in (INCREMENTAL, CUMULATIVE):
            raise ValueError(f"unknown triangle kind: {self.kind!r}")
        values = np.array(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValueError(f"triangle values must be square, got shape {values.shape}")
        n = values.shape[0]
        if n < 1:
            raise ValueError("triangle needs at least one period")
        for i in range(1, n + 1):
            row = values[i - 1]
            observed = row[: n - i + 1]
            if not np.all(np.isfinite(observed)):
                raise ValueError(f"non-finite amount in observed region, row {i}")
            if not np.all(np.isnan(row[n - i + 1:])):
                raise ValueError(f"unexpected value below the antidiagonal, row {i}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_rows(cls, rows, kind=INCREMENTAL):
        """Build a triangle from ragged per-occurrence rows.

        ``rows[i]`` must hold the ``I - i`` observed amounts of occurrence
        period ``i + 1`` (row lengths I, I-1, ..., 1).
        """
        n = len(rows)
        values = np.full((n, n), np.nan)
        for i, row in enumerate(rows):
            row = np.asarray(row, dtype=float)
            if row.shape != (n - i,):
                raise ValueError(
                    f"row {i + 1} must have {n - i} entries, got {len(row)}"
                )
            values[i, : n - i] = row
        return cls(values, kind)

    @property
    def n_periods(self) -> int:
        return self.values.shape[0]

    def cell(self, i: int, j: int) -> float:
        """Amount of observed cell (i, j), 1-based."""
        n = self.n_periods
        if not (1 <= i <= n and 1 <= j <= n and i + j <= n + 1):
            raise KeyError(f"cell ({i}, {j}) is not observed in a {n}-period triangle")
        return float(self.values[i - 1, j - 1])

    def observed_row(self, i: int) -> np.ndarray:
        """Observed amounts of occurrence period ``i`` in development order."""
        return self.values[i - 1, : self.n_periods - i + 1].copy()

    def latest_diagonal(self) -> np.ndarray:
        """Amounts on the last observed diagonal, one per occurrence period."""
        n = self.n_periods
        return np.array([self.values[i, n - i - 1] for i in range(n)])

    def observed_sum(self) -> float:
        return float(np.nansum(self.values))

    def scaled(self, factor: float) -> "Triangle":
        return Triangle(self.values * factor, self.kind)


@dataclass(frozen=True)
class CellIndexSets:
    """Partition of the I x I square into observed and unobserved clusters.

    Cells are kept in a fixed (row-major) order so downstream design
    matrices and reserve sums are reproducible.
    """

    n_periods: int
    observed: tuple[Cell, ...]
    unobserved: tuple[Cell, ...]

    def __post_init__(self):
        n = self.n_periods
        if len(self.observed) != n * (n + 1) // 2:
            raise ValueError("observed set has the wrong size")
        if len(self.unobserved) != n * (n - 1) // 2:
            raise ValueError("unobserved set has the wrong size")

    @classmethod
    def for_periods(cls, n: int) -> "CellIndexSets":
        if n < 1:
            raise ValueError("need at least one period")
        observed = tuple(
            (i, j) for i in range(1, n + 1) for j in range(1, n + 2 - i)
        )
        unobserved = tuple(
            (i, j) for i in range(2, n + 1) for j in range(n + 2 - i, n + 1)
        )
        return cls(n, observed, unobserved)


def index_sets(triangle: Triangle) -> CellIndexSets:
    """Observed/unobserved cluster coordinates for a triangle."""
    return CellIndexSets.for_periods(triangle.n_periods)


def to_cumulative(triangle: Triangle) -> Triangle:
    """Running row sums of an incremental triangle."""
    if triangle.kind != INCREMENTAL:
        raise KindMismatchError(f"expected an incremental triangle, got {triangle.kind}")
    n = triangle.n_periods
    values = np.full((n, n), np.nan)
    for i in range(n):
        values[i, : n - i] = np.cumsum(triangle.values[i, : n - i])
    return Triangle(values, CUMULATIVE)


def to_incremental(triangle: Triangle) -> Triangle:
    """First differences per row of a cumulative triangle."""
    if triangle.kind != CUMULATIVE:
        raise KindMismatchError(f"expected a cumulative triangle, got {triangle.kind}")
    n = triangle.n_periods
    values = np.full((n, n), np.nan)
    for i in range(n):
        row = triangle.values[i, : n - i]
        values[i, : n - i] = np.diff(row, prepend=0.0)
    return Triangle(values, INCREMENTAL)


def load_triangle(source, scale: float = 1.0, kind: str = INCREMENTAL) -> Triangle:
    """Parse a triangle from text.

    The format is a header line ``I=<n>`` followed by ``n`` comma-separated
    rows of ``n`` fields each, the unobserved fields left blank::

        I=3
        10,4,1
        12,5,
        9,,

    Parameters
    ----------
    source : str, path-like or text stream
        Path to a triangle file, or an open text stream.
    scale : float
        Multiplier applied to every amount (a file stored in 000's becomes
        currency units with ``scale=1000``).
    kind : str
        Kind to stamp on the result; the file format itself is kind-agnostic.

    Raises
    ------
    TriangleFormatError
        On an empty file, a malformed header, ragged rows, non-numeric or
        blank entries in the observed region, or values below the
        antidiagonal.
    """
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, "r", encoding="utf-8") as fh:
            text = fh.read()
    lines = [ln for ln in io.StringIO(text)]
    lines = [ln.rstrip("\n") for ln in lines]
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise TriangleFormatError("empty triangle file")
    header = _HEADER_RE.match(lines[0])
    if header is None:
        raise TriangleFormatError(f"expected header 'I=<n>', got {lines[0]!r}", row=0)
    n = int(header.group(1))
    if n < 1:
        raise TriangleFormatError("I must be at least 1", row=0)
    if len(lines) - 1 != n:
        raise TriangleFormatError(
            f"expected {n} data rows after the header, got {len(lines) - 1}"
        )
    values = np.full((n, n), np.nan)
    for i in range(1, n + 1):
        fields = lines[i].split(",")
        if len(fields) != n:
            raise TriangleFormatError(
                f"expected {n} comma-separated fields, got {len(fields)}", row=i
            )
        for j in range(1, n + 1):
            field = fields[j - 1].strip()
            if i + j <= n + 1:
                if not field:
                    raise TriangleFormatError(
                        "blank entry in the observed region", row=i, column=j
                    )
                try:
                    values[i - 1, j - 1] = float(field)
                except ValueError:
                    raise TriangleFormatError(
                        f"non-numeric entry {field!r}", row=i, column=j
                    ) from None
            elif field:
                raise TriangleFormatError(
                    f"unexpected entry {field!r} below the antidiagonal", row=i, column=j
                )
    return Triangle(values * scale, kind)
