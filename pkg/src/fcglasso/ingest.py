"""Reading forecast panels and writing/reading weight files.

Panel CSV layout: header ``period,actual,<forecaster_1>,...,<forecaster_p>``,
one row per period in chronological order, missing cells left empty.
"""

from __future__ import annotations

import csv
import io
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ForecastPanel

log = logging.getLogger(__name__)

IMPUTE_POLICIES = ("reject", "column_mean", "carry_forward")
MAX_MISSING_SHARE = 0.5


class DataError(ValueError):
    """Input data cannot be turned into a valid panel."""


@dataclass
class IngestResult:
    panel: ForecastPanel
    dropped: list = field(default_factory=list)  # forecaster ids removed by the missing-share filter
    imputed_cells: int = 0


def _parse_cell(text: str, row: int, col: str) -> float:
    text = text.strip()
    if text == "" or text.upper() in ("NA", "NAN"):
        return np.nan
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"row {row}, column {col!r}: cannot parse {text!r} as a number") from None
    if not np.isfinite(v):
        raise DataError(f"row {row}, column {col!r}: non-finite value {text!r}")
    return v


def read_panel_table(path) -> tuple[list, list, np.ndarray, np.ndarray]:
    """Raw table: periods, forecaster ids, actuals (T,), forecasts (T, p) with NaN holes."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except UnicodeDecodeError as exc:
        raise DataError(f"{path} is not valid UTF-8: {exc}") from None
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    rows = [r for r in rows if any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if len(header) < 4 or header[0] != "period" or header[1] != "actual":
        raise DataError("header must be 'period,actual,<forecaster_1>,...' with at least two forecasters")
    ids = header[2:]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate forecaster ids in header")

    periods, actuals, forecasts = [], [], []
    seen: dict = {}
    for i, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise DataError(f"row {i}: expected {len(header)} fields, found {len(r)}")
        period = r[0].strip()
        if not period:
            raise DataError(f"row {i}: empty period label")
        if period in seen:
            raise DataError(f"row {i}: duplicate period {period!r} (first seen in row {seen[period]})")
        seen[period] = i
        a = _parse_cell(r[1], i, "actual")
        if np.isnan(a):
            raise DataError(f"row {i}: the actual value is missing")
        periods.append(period)
        actuals.append(a)
        forecasts.append([_parse_cell(c, i, ids[j]) for j, c in enumerate(r[2:])])
    if not periods:
        raise DataError(f"{path} has a header but no data rows")
    return periods, ids, np.array(actuals), np.array(forecasts, dtype=float)


def _carry_forward(col: np.ndarray, name: str) -> np.ndarray:
    out = col.copy()
    if np.isnan(out[0]):
        raise DataError(f"column {name!r}: first value is missing, nothing to carry forward")
    for t in range(1, out.size):
        if np.isnan(out[t]):
            out[t] = out[t - 1]
    return out


def load_panel(path, impute_policy: str = "reject") -> IngestResult:
    """Read, filter and impute a panel CSV.

    Forecasters missing more than half of the periods are dropped before
    imputation; columns with no values at all are an input error.
    """
    if impute_policy not in IMPUTE_POLICIES:
        raise DataError(f"unknown impute policy {impute_policy!r}; choose from {IMPUTE_POLICIES}")
    periods, ids, y, F = read_panel_table(path)
    miss = np.isnan(F)
    empty = [ids[j] for j in range(F.shape[1]) if miss[:, j].all()]
    if empty:
        raise DataError(f"columns with no values: {empty}")
    share = miss.mean(axis=0)
    keep = share <= MAX_MISSING_SHARE
    dropped = [ids[j] for j in np.flatnonzero(~keep)]
    for j in np.flatnonzero(~keep):
        log.info("dropping forecaster %s: %.0f%% missing", ids[j], 100 * share[j])
    F = F[:, keep]
    ids = [i for i, k in zip(ids, keep) if k]
    if len(ids) < 2:
        raise DataError(f"fewer than two forecasters left after dropping {dropped}")

    holes = np.isnan(F)
    n_holes = int(holes.sum())
    if n_holes:
        if impute_policy == "reject":
            t, j = np.argwhere(holes)[0]
            raise DataError(f"{n_holes} missing cells, first at period {periods[t]!r}, "
                            f"forecaster {ids[j]!r} (impute_policy='reject')")
        if impute_policy == "column_mean":
            means = np.nanmean(F, axis=0)
            F = np.where(holes, means[None, :], F)
        else:
            F = np.column_stack([_carry_forward(F[:, j], ids[j]) for j in range(F.shape[1])])
    panel = ForecastPanel(tuple(periods), F, y, tuple(ids))
    return IngestResult(panel, dropped, n_holes)


def ingest_panel(path, impute_policy: str = "reject") -> ForecastPanel:
    return load_panel(path, impute_policy).panel


# ---------------------------------------------------------------------------
# output helpers


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fmt(x) -> str:
    """Shortest text that parses back to the same float."""
    return repr(float(x))


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_panel_csv(path, panel: ForecastPanel) -> None:
    rows = [[t, fmt(a), *map(fmt, f)] for t, a, f in zip(panel.times, panel.actuals, panel.forecasts)]
    atomic_write_text(path, csv_text(["period", "actual", *panel.forecaster_ids], rows))


def write_weights_csv(path, periods, regimes, ids, weights) -> None:
    """Columns ``period,regime,<ids>``; one row per period (or per regime for a fit)."""
    W = np.atleast_2d(np.asarray(weights, dtype=float))
    rows = [[t, int(r), *map(fmt, w)] for t, r, w in zip(periods, regimes, W)]
    atomic_write_text(path, csv_text(["period", "regime", *ids], rows))


def read_weights_csv(path) -> tuple[list, list, list, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["period", "regime"]:
        raise DataError(f"{path} is not a weights file")
    ids = rows[0][2:]
    periods = [r[0] for r in rows[1:]]
    regimes = [int(r[1]) for r in rows[1:]]
    W = np.array([[float(c) for c in r[2:]] for r in rows[1:]], dtype=float).reshape(-1, len(ids))
    return periods, regimes, ids, W
