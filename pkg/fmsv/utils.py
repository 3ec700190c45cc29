"""
Some utilities for reading and writing the files that fmsv works with:
numeric CSV panels and tables, and aligned plain-text tables. Tables go
through pandas data frames.
"""

import os

import numpy as np
import pandas as pd

from ._model import DataError


__all__ = ["read_panel", "write_panel", "read_table", "write_table", "format_table"]


def format_number(value):
    """Format a number with 17 significant digits, so that it reads back
    to the same float. Integers and strings are passed through.
    """
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "%.17g" % value
    if value is None:
        return ""
    return str(value)


def _is_number(value):
    return isinstance(value, (int, float, np.integer, np.floating)) and not isinstance(
        value, (bool, np.bool_)
    )


def _frame(header, rows, fmt):
    """Build a data frame from rows. Columns holding only numbers stay
    numeric; other columns are formatted to strings with ``fmt``.
    """
    rows = [list(row) for row in rows]
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise ValueError(f"Row {i + 1} has {len(row)} cells, header {len(header)}")
    columns = {}
    for j in range(len(header)):
        values = [row[j] for row in rows]
        if all(_is_number(v) for v in values):
            columns[j] = np.asarray(values, dtype=float if not values else None)
        else:
            columns[j] = pd.Series([fmt(v) for v in values], dtype=object)
    df = pd.DataFrame(columns)
    df.columns = [str(h) for h in header]
    return df


def write_table(filename, header, rows):
    """Write a CSV table with a header row. Floats are written with full
    precision, so equal inputs give byte-identical files.
    """
    df = _frame(header, rows, format_number)
    df.to_csv(
        filename,
        index=False,
        float_format="%.17g",
        na_rep="nan",
        lineterminator="\n",
        encoding="utf-8",
    )


def _read_frame(filename, **kwargs):
    name = os.path.basename(filename)
    try:
        return pd.read_csv(
            filename, keep_default_na=False, index_col=False, encoding="utf-8", **kwargs
        )
    except pd.errors.EmptyDataError:
        raise DataError(f"{name} is empty") from None
    except pd.errors.ParserError as err:
        raise DataError(f"{name} is malformed: {err}") from None


def read_table(filename):
    """Read a CSV table written by ``write_table()``. Returns
    ``(header, rows)`` with the cells as strings.
    """
    df = _read_frame(filename, dtype=str)
    return list(df.columns), df.fillna("").values.tolist()


def write_panel(filename, y, prefix="y"):
    """Write a (p, T) panel as a CSV with T rows and p columns, with
    header ``y1..yp``.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim != 2:
        raise ValueError(f"write_panel() needs a 2D array, got shape {y.shape}")
    df = pd.DataFrame(y.T, columns=[f"{prefix}{i + 1}" for i in range(y.shape[0])])
    df.to_csv(filename, index=False, float_format="%.17g", lineterminator="\n")


def read_panel(filename):
    """Read a numeric CSV panel (T rows, p columns, one header row) and
    return it as a (p, T) array. Non-numeric or non-finite cells and
    short rows raise a DataError naming the row and column (1-based,
    counting data rows).
    """
    df = _read_frame(filename, float_precision="round_trip")
    if len(df) == 0:
        raise DataError(f"{os.path.basename(filename)} has no data rows")
    values = df.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
    bad = np.argwhere(~np.isfinite(values))
    if len(bad):
        i, j = bad[0]
        cell = df.iat[i, j]
        cell = "" if not isinstance(cell, str) else cell
        raise DataError(
            f"Invalid value {cell!r} at row {i + 1}, column {df.columns[j]!r}"
        )
    return values.T.copy()


def format_table(header, rows, precision=4):
    """Format a table as aligned plain text. Floats are shown with the
    given number of significant digits.
    """

    def fmt_float(value):
        return "%.*g" % (precision, value)

    def fmt(value):
        if isinstance(value, (float, np.floating)):
            return fmt_float(value) if np.isfinite(value) else str(value)
        return format_number(value)

    df = _frame(header, rows, fmt)
    text = df.to_string(index=False, float_format=fmt_float, na_rep="nan")
    return text + "\n"
