"""CSV ingestion, propensity trimming, and flat key=value config/manifest files."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .correction import MissingDataset, TreatmentDataset

log = logging.getLogger("robart.dataio")

_MISSING_TOKENS = {"", "na", "nan", "null", "none", "."}


class CsvFormatError(ValueError):
    """Input file violates the declared schema."""


@dataclass(frozen=True)
class CsvSchema:
    """Column roles for load_csv.

    kind='missing' reads the indicator as an observation flag (blank outcomes
    allowed where it is 0); kind='treatment' reads it as a treatment arm
    (outcomes required everywhere).
    """

    outcome: str
    indicator: str
    covariates: tuple
    categorical: tuple = ()
    kind: str = "missing"


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        return float(cell)
    except ValueError:
        raise CsvFormatError(f"row {row}, column {col!r}: cannot parse {cell!r} as a number") from None


def load_csv(path, schema: CsvSchema):
    """Read a dataset, one-hot expanding categorical columns (first-appearance order).

    Returns a MissingDataset (kind='missing') or TreatmentDataset
    (kind='treatment'). An outcome value present on a row flagged unobserved
    is masked with a warning; a missing outcome on an observed row is an error.
    """
    if schema.kind not in ("missing", "treatment"):
        raise CsvFormatError(f"schema kind must be 'missing' or 'treatment' (got {schema.kind!r})")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file (header row required)") from None
        header = [h.strip() for h in header]
        col_index = {name: i for i, name in enumerate(header)}
        for name in (schema.outcome, schema.indicator, *schema.covariates):
            if name not in col_index:
                raise CsvFormatError(f"{path}: column {name!r} not found (header: {header})")
        for name in schema.categorical:
            if name not in schema.covariates:
                raise CsvFormatError(f"categorical column {name!r} is not among the covariates")

        y_vals: list = []
        ind_vals: list = []
        raw_cols: dict = {name: [] for name in schema.covariates}
        for row_num, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CsvFormatError(f"row {row_num}: expected {len(header)} cells, got {len(row)}")
            ind_cell = row[col_index[schema.indicator]].strip()
            ind = _parse_float(ind_cell, row_num, schema.indicator)
            if ind not in (0.0, 1.0):
                raise CsvFormatError(
                    f"row {row_num}, column {schema.indicator!r}: indicator must be 0 or 1 (got {ind_cell!r})"
                )
            ind_vals.append(int(ind))
            y_cell = row[col_index[schema.outcome]].strip()
            if y_cell.lower() in _MISSING_TOKENS:
                if schema.kind == "treatment" or ind == 1.0:
                    raise CsvFormatError(
                        f"row {row_num}: outcome is missing but the row is marked observed"
                    )
                y_vals.append(float("nan"))
            else:
                y_vals.append(_parse_float(y_cell, row_num, schema.outcome))
            for name in schema.covariates:
                cell = row[col_index[name]].strip()
                if name in schema.categorical:
                    raw_cols[name].append(cell)
                else:
                    raw_cols[name].append(_parse_float(cell, row_num, name))

    n = len(y_vals)
    if n == 0:
        raise CsvFormatError(f"{path}: no data rows")
    y = np.asarray(y_vals, dtype=float)
    ind = np.asarray(ind_vals, dtype=np.int64)

    if schema.kind == "missing":
        stale = (ind == 0) & np.isfinite(y)
        if stale.any():
            log.warning("%d outcome values on unobserved rows were masked", int(stale.sum()))
            y = np.where(stale, np.nan, y)

    columns: list = []
    groups: list = []
    for name in schema.covariates:
        if name in schema.categorical:
            levels: list = []
            for cell in raw_cols[name]:
                if cell not in levels:
                    levels.append(cell)
            start = len(columns)
            values = raw_cols[name]
            for level in levels:
                columns.append(np.array([1.0 if v == level else 0.0 for v in values]))
            groups.append(tuple(range(start, start + len(levels))))
        else:
            columns.append(np.asarray(raw_cols[name], dtype=float))
    x = np.column_stack(columns)

    log.info(
        "loaded %s: %d rows, %d expanded covariate columns (%d categorical groups)",
        path,
        n,
        x.shape[1],
        len(groups),
    )
    if schema.kind == "missing":
        return MissingDataset(y, ind, x, tuple(groups))
    return TreatmentDataset(y, ind, x, tuple(groups))


def propensity_keep_mask(pi_hat, t: float) -> np.ndarray:
    """Rows whose estimated propensity lies inside [t, 1-t]; t=0 keeps all."""
    if not 0.0 <= t < 0.5:
        raise ValueError(f"trim threshold must be in [0, 0.5) (got {t})")
    pi_hat = np.asarray(pi_hat, dtype=float)
    return (pi_hat >= t) & (pi_hat <= 1.0 - t)


def trim_by_propensity(data: TreatmentDataset, pi_hat, t: float):
    """Apply the propensity filter; returns (subset dataset, effective sample size).

    Errors when nothing survives or the survivors all sit in one treatment
    arm (no estimand is identified on such a sample).
    """
    pi_hat = np.asarray(pi_hat, dtype=float)
    if pi_hat.shape != (data.n,):
        raise ValueError("one propensity value per row is required")
    keep = propensity_keep_mask(pi_hat, t)
    n_bar = int(keep.sum())
    if n_bar == 0:
        raise ValueError(f"trimming at t={t} removed every row")
    d_kept = data.d[keep]
    if d_kept.min() == d_kept.max():
        raise ValueError(f"trimming at t={t} left a single treatment arm (kept {n_bar} rows)")
    subset = TreatmentDataset(data.y[keep], d_kept, data.x[keep], data.onehot_groups)
    return subset, n_bar


# --------------------------------------------------------------------------
# Flat config / manifest files


def read_flat_config(path) -> dict:
    """Parse `key = value` lines; '#' starts a comment; meta.* keys are kept as-is."""
    out: dict = {}
    with open(path, encoding="utf-8") as fh:
        for line_num, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise CsvFormatError(f"{path}:{line_num}: expected 'key = value' (got {stripped!r})")
            key, _, value = stripped.partition("=")
            out[key.strip()] = value.strip()
    return out


def write_flat_config(path, mapping: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in mapping.items():
            fh.write(f"{key} = {value}\n")
