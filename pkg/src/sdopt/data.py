"""Embedded appendix datasets, published reference values, CSV I/O and statistics.

Both embedded tables are in percent and are used raw (no rescaling). The
reference values below are the published numbers the ``reproduce`` command
compares against; each carries a comment naming the table it comes from.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from sdopt.errors import DimensionError, InvalidInputError
from sdopt.scenario import ScenarioMatrix, ScenarioVector

UNITS = ("percent", "decimal")

# Appendix table "Returns and descriptive statistics for selected assets over
# 22 years": annual returns in percent, rows are years 1..22.
APPENDIX_8ASSET = np.array(
    [
        [7.5, -5.8, -14.8, -18.5, -30.2, 2.3, -14.9, 67.7],
        [8.4, 2, -26.5, -28.4, -33.8, 0.2, -23.2, 72.2],
        [6.1, 5.6, 37.1, 38.5, 31.8, 12.3, 35.4, -24],
        [5.2, 17.5, 23.6, 26.6, 28, 15.6, 2.5, -4],
        [5.5, 0.2, -7.4, -2.6, 9.3, 3, 18.1, 20],
        [7.7, -1.8, 6.4, 9.3, 14.6, 1.2, 32.6, 29.5],
        [10.9, -2.2, 18.4, 25.6, 30.7, 2.3, 4.8, 21.2],
        [12.7, -5.3, 32.3, 33.7, 36.7, 3.1, 22.6, 29.6],
        [15.6, 0.3, -5.1, -3.7, -1, 7.3, -2.3, -31.2],
        [11.7, 46.5, 21.5, 18.7, 21.3, 31.1, -1.9, 8.4],
        [9.2, -1.5, 22.4, 23.5, 21.7, 8, 23.7, -12.8],
        [10.3, 15.9, 6.1, 3, -9.7, 15, 7.4, -17.5],
        [8, 36.6, 31.6, 32.6, 33.3, 21.3, 56.2, 0.6],
        [6.3, 30.9, 18.6, 16.1, 8.6, 15.6, 69.4, 21.6],
        [6.1, -7.5, 5.2, 2.3, -4.1, 2.3, 24.6, 24.4],
        [7.1, 8.6, 16.5, 17.9, 16.5, 7.6, 28.3, -13.9],
        [8.7, 21.2, 31.6, 29.2, 20.4, 14.2, 10.5, -2.3],
        [8, 5.4, -3.2, -6.2, -17, 8.3, -23.4, -7.8],
        [5.7, 19.3, 30.4, 34.2, 59.4, 16.1, 12.1, -4.2],
        [3.6, 7.9, 7.6, 9, 17.4, 7.6, -12.2, -7.4],
        [3.1, 21.7, 10, 11.3, 16.2, 11, 32.6, 14.6],
        [4.5, -11.1, 1.2, -0.1, -3.2, -3.5, 7.8, -1],
    ]
)

# Appendix table "Daily returns and descriptive statistics for selected
# portfolios": daily returns in percent, July 2024 trading days.
APPENDIX_5ASSET = np.array(
    [
        [-1.01, -0.72, 1.10, -1.80, -0.65],
        [-2.50, -0.22, -0.86, -0.09, 0.64],
        [-0.38, 0.27, -0.21, 0.41, 0.41],
        [-1.11, 0.15, -0.33, 2.10, -1.61],
        [0.44, -0.22, -0.64, 0.59, 0.33],
        [0.05, -1.49, 1.52, -2.59, -0.26],
        [-0.34, 0.79, 1.31, 2.75, 1.93],
        [4.00, 1.60, 2.53, 0.73, 3.72],
        [1.76, 1.04, -0.06, 0.41, 2.17],
        [1.53, 0.02, -3.42, -2.50, -0.63],
        [2.77, 1.28, 2.59, 0.40, 1.83],
        [0.71, 0.69, -1.44, 1.12, 0.94],
        [-2.24, -1.24, -1.74, -1.72, -1.78],
        [0.08, -1.51, -0.23, -2.67, -1.81],
        [0.35, 0.29, -0.54, -0.42, -0.25],
        [2.55, -0.09, 0.08, -0.39, 1.14],
        [-2.21, 2.88, -1.61, -2.51, -0.41],
        [1.67, -0.21, 1.05, 0.00, 2.21],
        [0.17, 1.26, 2.29, 0.93, 2.13],
        [-0.97, -0.79, -0.48, -0.48, -1.13],
        [-0.11, 0.79, 0.98, -1.65, 0.07],
        [0.24, 1.89, 0.72, -1.14, -1.23],
    ]
)

APPENDIX_5ASSET_DATES = (
    "2024-07-01", "2024-07-02", "2024-07-03", "2024-07-05", "2024-07-08", "2024-07-09",
    "2024-07-10", "2024-07-11", "2024-07-12", "2024-07-15", "2024-07-16", "2024-07-17",
    "2024-07-18", "2024-07-19", "2024-07-22", "2024-07-23", "2024-07-24", "2024-07-25",
    "2024-07-26", "2024-07-29", "2024-07-30", "2024-07-31",
)  # fmt: skip

STAT_FIELDS = (
    "mean", "median", "std", "variance", "skewness", "kurtosis", "min", "max", "p25", "p75",
)  # fmt: skip

# Descriptive-statistics block of the 8-asset appendix table (rows in
# STAT_FIELDS order, columns asset 1..8).
APPENDIX_8ASSET_STATS = np.array(
    [
        [7.81, 9.29, 11.97, 12.36, 12.13, 9.17, 14.12, 8.35],
        [7.6, 5.5, 13.25, 13.7, 16.35, 7.8, 11.3, -0.2],
        [3.04, 15.21, 16.81, 17.86, 22.36, 8.05, 23.54, 26.34],
        [9.27, 231.52, 282.82, 319.13, 500.06, 64.89, 554.22, 693.92],
        [0.73, 0.85, -0.45, -0.48, -0.29, 0.82, 0.41, 0.93],
        [0.27, -0.05, -0.48, -0.45, -0.07, 0.62, -0.03, 0.54],
        [3.1, -11.1, -26.5, -28.4, -33.8, -3.5, -23.4, -31.2],
        [15.6, 46.5, 37.1, 38.5, 59.4, 31.1, 69.4, 72.2],
        [5.8, -1.72, 2.2, 0.5, -2.65, 2.47, -0.8, -7.7],
        [9.07, 18.85, 23.3, 26.35, 26.42, 14.8, 27.37, 21.5],
    ]
)

# Descriptive-statistics block of the 5-asset daily appendix table.
APPENDIX_5ASSET_STATS = np.array(
    [
        [0.25, 0.29, 0.12, -0.39, 0.35],
        [0.12, 0.21, -0.13, -0.24, 0.20],
        [1.66, 1.11, 1.50, 1.53, 1.51],
        [2.74, 1.24, 2.25, 2.35, 2.29],
        [0.34, 0.29, -0.22, 0.09, 0.37],
        [-0.22, -0.23, -0.16, -0.75, -0.68],
        [-2.50, -1.51, -3.42, -2.67, -1.81],
        [4.00, 2.88, 2.59, 2.75, 3.72],
        [-0.82, -0.22, -0.61, -1.70, -0.64],
        [1.32, 0.97, 1.08, 0.54, 1.65],
    ]
)

# Table 3 (second-order dominance, 8-asset data, expected-return objective):
# published optimal weights, objective in percent and number of active
# dominance constraints.
TABLE3_WEIGHTS = np.array([0.0, 0.0, 0.0680, 0.1880, 0.0, 0.3913, 0.2309, 0.1216])
TABLE3_OBJECTIVE = 11.00
TABLE3_ACTIVE = 3

# Table 4 (third-order dominance, 8-asset data): the "Our approach" column.
TABLE4_WEIGHTS = np.array([0.0, 0.0, 0.2549, 0.0022, 0.0, 0.3763, 0.2485, 0.1180])
TABLE4_OBJECTIVE = 11.03
# Table 4: the third-order comparison column from the literature.
TABLE4_LITERATURE_WEIGHTS = np.array([0.0, 0.0, 0.2621, 0.0, 0.0, 0.4081, 0.2403, 0.0892])

# Table 2 (second-order dominance, 5-asset data, AVaR objective): levels,
# published weights per level and published risk values.
TABLE2_BETAS = (0.1, 0.5, 0.8)
TABLE2_WEIGHTS = np.array(
    [
        [0.2108, 0.1855, 0.3852, 0.0589, 0.1491],
        [0.1920, 0.1224, 0.2128, 0.0834, 0.3639],
        [0.1442, 0.3965, 0.1758, 0.1955, 0.0788],
    ]
)
TABLE2_RISK = (0.0742, 0.6645, 1.1211)

# Order-sweep figure for the 5-asset data: orders and plotted objective values.
FIG5_ORDERS = ("2", "3", "5", "10", "15", "20", "inf")
FIG5_OBJECTIVE = (0.287, 0.314, 0.318, 0.318, 0.329, 0.347, 0.352)

EMBEDDED = ("appendix8", "appendix5")


@dataclass(frozen=True)
class Dataset:
    """A scenario matrix with its unit label and optional row dates."""

    matrix: ScenarioMatrix
    unit: str = "percent"
    dates: tuple[str, ...] | None = None
    source: str = ""

    def __post_init__(self) -> None:
        if self.unit not in UNITS:
            raise InvalidInputError(f"unit must be one of {UNITS}, got {self.unit!r}")
        if self.dates is not None and len(self.dates) != self.matrix.n:
            raise DimensionError(f"{len(self.dates)} dates for {self.matrix.n} rows")


def _names(d: int) -> tuple[str, ...]:
    return tuple(f"asset {j + 1}" for j in range(d))


def appendix_8asset() -> Dataset:
    m = ScenarioMatrix(APPENDIX_8ASSET, _names(8))
    return Dataset(m, "percent", None, "appendix8")


def appendix_5asset() -> Dataset:
    m = ScenarioMatrix(APPENDIX_5ASSET, _names(5))
    return Dataset(m, "percent", APPENDIX_5ASSET_DATES, "appendix5")


def appendix_stats(name: str) -> np.ndarray:
    """Published statistics block (``STAT_FIELDS`` x assets) of an embedded table."""
    if name == "appendix8":
        return APPENDIX_8ASSET_STATS
    if name == "appendix5":
        return APPENDIX_5ASSET_STATS
    raise InvalidInputError(f"no published statistics for {name!r}")


def load_dataset(source: str, unit: str = "percent") -> Dataset:
    """An embedded table by name, or a scenario CSV by path.

    Embedded tables are percent data, so asking for them in decimal is an
    input error rather than a silent rescale.
    """
    if source in EMBEDDED:
        if unit != "percent":
            raise InvalidInputError(f"{source} is percent data; --unit {unit} does not apply")
        return appendix_8asset() if source == "appendix8" else appendix_5asset()
    return load_csv(source, unit)


def _parse_value(text: str, unit: str, where: str) -> float:
    s = text.strip()
    if s.endswith("%"):
        if unit != "percent":
            raise InvalidInputError(f"{where}: percent sign in decimal data")
        s = s[:-1].strip()
    try:
        v = float(s)
    except ValueError:
        raise InvalidInputError(f"{where}: not a number: {text!r}") from None
    if not math.isfinite(v):
        raise InvalidInputError(f"{where}: non-finite value {text!r}")
    return v


def _read_table(path: str | Path, unit: str) -> tuple[list[str], np.ndarray, tuple[str, ...] | None]:
    if unit not in UNITS:
        raise InvalidInputError(f"unit must be one of {UNITS}, got {unit!r}")
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if any(c.strip() for c in r)]
    except OSError as exc:
        raise InvalidInputError(f"cannot read {path}: {exc}") from None
    if len(rows) < 2:
        raise InvalidInputError(f"{path}: need a header and at least one scenario row")
    header = [h.strip() for h in rows[0]]
    has_date = header[0].lower() == "date"
    names = header[1:] if has_date else header
    if not names:
        raise InvalidInputError(f"{path}: no asset columns")
    values, dates = [], []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DimensionError(f"{path}:{i}: {len(row)} fields, header has {len(header)}")
        if has_date:
            dates.append(row[0].strip())
            row = row[1:]
        values.append([_parse_value(c, unit, f"{path}:{i}") for c in row])
    return names, np.array(values, dtype=float), tuple(dates) if has_date else None


def load_csv(path: str | Path, unit: str = "percent") -> Dataset:
    """Read a scenario CSV: header of asset names, one scenario per row.

    An optional first column named ``date`` is kept as row labels and ignored
    for computation. Values are taken as given; ``unit`` only labels them.
    """
    names, values, dates = _read_table(path, unit)
    return Dataset(ScenarioMatrix(values, names), unit, dates, str(path))


def save_csv(path: str | Path, data: Dataset, digits: int = 17) -> None:
    """Write ``data`` in the format :func:`load_csv` reads."""
    m = data.matrix
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow((["date"] if data.dates else []) + list(m.asset_names))
        for i in range(m.n):
            row = [f"{v:.{digits}g}" for v in m.returns[i]]
            w.writerow(([data.dates[i]] if data.dates else []) + row)


def load_benchmark_csv(path: str | Path, n: int, unit: str = "percent") -> ScenarioVector:
    """A benchmark series from a one-column CSV (optionally with a date column)."""
    names, values, _ = _read_table(path, unit)
    if values.shape[1] != 1:
        raise DimensionError(f"{path}: benchmark CSV must have one value column, found {len(names)}")
    if values.shape[0] != n:
        raise DimensionError(f"{path}: benchmark has {values.shape[0]} rows, scenarios have {n}")
    return ScenarioVector(values[:, 0])


def describe_column(x: np.ndarray) -> dict[str, float | None]:
    """Descriptive statistics of one return series.

    Standard deviation and variance use the ``n - 1`` denominator; skewness
    and excess kurtosis are the moment (biased) estimators, which are the
    conventions that reproduce the appendix tables; percentiles interpolate
    linearly between closest ranks. Skewness and kurtosis of a constant
    series are undefined and returned as ``None``.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise InvalidInputError("need a non-empty 1-d series")
    n = x.size
    constant = bool(np.all(x == x[0]))
    std = float(x.std(ddof=1)) if n > 1 else 0.0
    return {
        "mean": float(x.mean()),
        "median": float(np.median(x)),
        "std": std,
        "variance": std * std,
        "skewness": None if constant else float(stats.skew(x, bias=True)),
        "kurtosis": None if constant else float(stats.kurtosis(x, fisher=True, bias=True)),
        "min": float(x.min()),
        "max": float(x.max()),
        "p25": float(np.percentile(x, 25)),
        "p75": float(np.percentile(x, 75)),
    }


def describe(m: ScenarioMatrix) -> list[dict]:
    """Per-asset statistics, each entry tagged with its asset name."""
    return [{"asset": name, **describe_column(m.returns[:, j])} for j, name in enumerate(m.asset_names)]


def stats_table(m: ScenarioMatrix) -> np.ndarray:
    """Statistics as a ``STAT_FIELDS x d`` array (NaN where undefined)."""
    rows = describe(m)
    return np.array([[np.nan if r[f] is None else r[f] for r in rows] for f in STAT_FIELDS])


def column_benchmark(m: ScenarioMatrix, name: str) -> ScenarioVector:
    if name not in m.asset_names:
        raise InvalidInputError(f"no column named {name!r}; have {list(m.asset_names)}")
    return m.column(name)


def weights_vector(values: Sequence[float], d: int) -> np.ndarray:
    w = np.asarray(values, dtype=float)
    if w.shape != (d,):
        raise DimensionError(f"{w.size} weights for {d} assets")
    return w
