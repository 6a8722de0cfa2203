"""Paired observations and their CSV readers."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import EmptySample, MalformedCsv

__all__ = ["Dataset", "read_wy_csv", "read_replicate_csv"]


@dataclass(frozen=True)
class Dataset:
    """Observed covariate ``W`` and response ``Y``.

    ``X`` holds the true covariate when it is known (simulation only) and
    ``replicates`` an optional ``n x k`` array of repeated measurements of
    ``W`` with NaN marking missing cells.
    """

    W: np.ndarray
    Y: np.ndarray
    X: Optional[np.ndarray] = None
    replicates: Optional[np.ndarray] = None

    def __post_init__(self):
        W = np.asarray(self.W, dtype=float).ravel()
        Y = np.asarray(self.Y, dtype=float).ravel()
        if W.size != Y.size:
            raise ValueError(f"W has {W.size} values but Y has {Y.size}")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(Y))):
            raise ValueError("W and Y must be finite")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "Y", Y)
        if self.X is not None:
            X = np.asarray(self.X, dtype=float).ravel()
            if X.size != W.size:
                raise ValueError("X must match W in length")
            object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return int(self.W.size)

    def require_nonempty(self):
        if self.n == 0:
            raise EmptySample("dataset has no observations")


def _rows(path):
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if any(c.strip() for c in r)]
    except OSError as exc:
        raise MalformedCsv(f"cannot read {path}: {exc.strerror}") from exc
    if not rows:
        raise MalformedCsv(f"{path} is empty")
    return [c.strip() for c in rows[0]], rows[1:]


def _number(cell, path, lineno):
    cell = cell.strip()
    if cell == "" or cell.upper() == "NA":
        return math.nan
    try:
        return float(cell)
    except ValueError:
        raise MalformedCsv(f"{path}:{lineno}: not a number: {cell!r}") from None


def read_wy_csv(path) -> Dataset:
    """Read a CSV with a header naming columns ``W`` and ``Y``."""
    header, body = _rows(path)
    if "W" not in header or "Y" not in header:
        raise MalformedCsv(f"{path}: header must contain W and Y, got {header}")
    iw, iy = header.index("W"), header.index("Y")
    W, Y = [], []
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise MalformedCsv(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        w, y = _number(row[iw], path, lineno), _number(row[iy], path, lineno)
        if not (math.isfinite(w) and math.isfinite(y)):
            raise MalformedCsv(f"{path}:{lineno}: missing W or Y")
        W.append(w)
        Y.append(y)
    if not W:
        raise MalformedCsv(f"{path}: no data rows")
    return Dataset(np.array(W), np.array(Y))


def read_replicate_csv(path) -> np.ndarray:
    """Read replicate columns ``W1..Wk``; empty cells become NaN."""
    header, body = _rows(path)
    cols = [i for i, name in enumerate(header) if name.startswith("W") and name[1:].isdigit()]
    if len(cols) < 1:
        raise MalformedCsv(f"{path}: header must name columns W1..Wk, got {header}")
    out = []
    for lineno, row in enumerate(body, start=2):
        row = row + [""] * (len(header) - len(row))
        out.append([_number(row[i], path, lineno) for i in cols])
    if not out:
        raise MalformedCsv(f"{path}: no data rows")
    return np.array(out, dtype=float)
