"""Time grids, signals, difference operator, noise injection and metrics.

Also holds the CSV readers/writers for signals and component sets.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import DataIngestionError, InvalidInputError

# Reproduces the published true-TV values of cos(5*pi*t), cos(6.4*pi*t) and the
# x2 chirp on [0, 6] to four decimals.
DEFAULT_N = 2400
MAPE_LABEL_FLOOR = 1e-8


@dataclass(frozen=True)
class TimeGrid:
    """Uniform sampling grid ``t_i = t_start + i * (t_end - t_start) / (n - 1)``."""

    t_start: float = 0.0
    t_end: float = 6.0
    n: int = DEFAULT_N

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise InvalidInputError(f"grid needs n >= 2 samples, got {self.n}")
        if not (math.isfinite(self.t_start) and math.isfinite(self.t_end)):
            raise InvalidInputError("grid bounds must be finite")
        if self.t_end <= self.t_start:
            raise InvalidInputError(
                f"t_end ({self.t_end}) must exceed t_start ({self.t_start})")

    @property
    def step(self) -> float:
        return (self.t_end - self.t_start) / (self.n - 1)

    @property
    def t(self) -> np.ndarray:
        return self.t_start + np.arange(self.n) * self.step

    @classmethod
    def from_samples(cls, t, rtol: float = 1e-6) -> "TimeGrid":
        t = np.asarray(t, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise InvalidInputError("time column needs at least two samples")
        grid = cls(float(t[0]), float(t[-1]), int(t.size))
        if not np.allclose(t, grid.t, rtol=0, atol=rtol * (grid.t_end - grid.t_start)):
            raise InvalidInputError("time samples are not uniformly spaced")
        return grid


@dataclass(frozen=True)
class Signal:
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1 or values.size != self.grid.n:
            raise InvalidInputError(
                f"signal has {values.size} values but grid has {self.grid.n} samples")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("signal contains non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def t(self) -> np.ndarray:
        return self.grid.t

    def __len__(self):
        return self.grid.n


@dataclass
class ComponentSet:
    """``M`` predicted IMFs (rows of ``components``) plus the residue."""

    components: np.ndarray
    residue: np.ndarray

    def __post_init__(self):
        self.components = np.atleast_2d(np.asarray(self.components, dtype=float))
        self.residue = np.asarray(self.residue, dtype=float)
        if self.components.shape[0] < 1:
            raise InvalidInputError("a component set needs at least one IMF")
        if self.residue.shape != (self.components.shape[1],):
            raise InvalidInputError("residue length differs from component length")

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def reconstruct(self) -> np.ndarray:
        return self.components.sum(axis=0) + self.residue

    def as_array(self) -> np.ndarray:
        """Stack as ``(M + 1, N)`` with the residue last."""
        return np.vstack([self.components, self.residue[None, :]])


def diff(x) -> np.ndarray:
    """First-order forward difference, ``out[i] = x[i+1] - x[i]``."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise InvalidInputError("diff needs a 1-D vector of length >= 2")
    return x[1:] - x[:-1]


def total_variation(x) -> float:
    return float(np.abs(diff(x)).sum())


@dataclass(frozen=True)
class MetricReport:
    """Error and smoothness of one predicted component against its label.

    ``mape`` is NaN when every label entry is below the exclusion floor.
    """

    mae: float
    rmse: float
    mape: float
    tv: float
    mape_excluded_count: int = 0

    @property
    def mape_defined(self) -> bool:
        return not math.isnan(self.mape)

    def as_dict(self) -> dict:
        return {"mae": self.mae, "rmse": self.rmse, "mape": self.mape,
                "tv": self.tv, "mape_excluded_count": self.mape_excluded_count}


def metrics(pred, label) -> MetricReport:
    """MAE, RMSE, MAPE and TV of ``pred`` against ``label``.

    MAPE averages only over indices where ``|label| >= 1e-8``; the number of
    skipped indices is reported in ``mape_excluded_count``.
    """
    pred = np.asarray(pred, dtype=float)
    label = np.asarray(label, dtype=float)
    if pred.shape != label.shape or pred.ndim != 1:
        raise InvalidInputError(
            f"pred {pred.shape} and label {label.shape} must be equal-length vectors")
    if pred.size < 2:
        raise InvalidInputError("metrics need at least two samples")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(label))):
        raise InvalidInputError("metrics inputs must be finite")
    err = pred - label
    kept = np.abs(label) >= MAPE_LABEL_FLOOR
    n_kept = int(kept.sum())
    mape = float(np.mean(np.abs(err[kept] / label[kept]))) if n_kept else math.nan
    return MetricReport(
        mae=float(np.mean(np.abs(err))),
        rmse=float(np.sqrt(np.mean(err * err))),
        mape=mape,
        tv=total_variation(pred),
        mape_excluded_count=pred.size - n_kept,
    )


def add_noise_snr(x, snr_db: float, seed):
    """Add white Gaussian noise at exactly ``snr_db`` decibels.

    The drawn noise is rescaled to its realized power, so
    ``10 * log10(P_x / P_noise) == snr_db`` up to round-off. Accepts a
    :class:`Signal` (returns a Signal) or a plain vector.
    """
    values = x.values if isinstance(x, Signal) else np.asarray(x, dtype=float)
    if not math.isfinite(snr_db):
        raise InvalidInputError("snr_db must be finite")
    p_signal = float(np.mean(values ** 2))
    if p_signal == 0.0:
        raise InvalidInputError("SNR is undefined for an identically zero signal")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(values.shape)
    noise *= math.sqrt(p_signal / (10.0 ** (snr_db / 10.0)) / np.mean(noise ** 2))
    noisy = values + noise
    if isinstance(x, Signal):
        return Signal(x.grid, noisy)
    return noisy


def snr_db(clean, noisy) -> float:
    clean = np.asarray(clean, dtype=float)
    noise = np.asarray(noisy, dtype=float) - clean
    return float(10.0 * np.log10(np.mean(clean ** 2) / np.mean(noise ** 2)))


# -- CSV ---------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def write_signal_csv(path, signal: Signal) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "value"])
        for t, v in zip(signal.t, signal.values):
            w.writerow([_fmt(t), _fmt(v)])


def _read_rows(path) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    if not path.is_file():
        raise DataIngestionError(f"{path}: no such file")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise DataIngestionError(f"{path}: empty file")
    return [h.strip() for h in rows[0]], rows[1:]


def _parse_float(cell: str, path, lineno: int) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise DataIngestionError(f"{path}:{lineno}: non-numeric value {cell!r}") from None
    if not math.isfinite(v):
        raise DataIngestionError(f"{path}:{lineno}: missing or non-finite value")
    return v


def read_signal_csv(path) -> Signal:
    """Read a ``t,value`` or ``date,value`` CSV.

    Dated series are placed on an integer grid (one unit per row); missing
    values are an error, never imputed.
    """
    header, rows = _read_rows(path)
    if len(header) != 2 or header[1] != "value" or header[0] not in ("t", "date"):
        raise DataIngestionError(f"{path}: expected header 't,value' or 'date,value'")
    if len(rows) < 2:
        raise DataIngestionError(f"{path}: need at least two samples")
    values = []
    times = []
    for i, row in enumerate(rows, start=2):
        if len(row) != 2:
            raise DataIngestionError(f"{path}:{i}: expected 2 columns, got {len(row)}")
        values.append(_parse_float(row[1], path, i))
        if header[0] == "t":
            times.append(_parse_float(row[0], path, i))
    if header[0] == "date":
        grid = TimeGrid(0.0, float(len(values) - 1), len(values))
    else:
        try:
            grid = TimeGrid.from_samples(times)
        except InvalidInputError as exc:
            raise DataIngestionError(f"{path}: {exc}") from None
    return Signal(grid, np.array(values))


def write_components_csv(path, t, components, residue=None) -> None:
    components = np.atleast_2d(np.asarray(components, dtype=float))
    header = ["t"] + [f"imf{i + 1}" for i in range(components.shape[0])]
    cols = [np.asarray(t, dtype=float)] + list(components)
    if residue is not None:
        header.append("residue")
        cols.append(np.asarray(residue, dtype=float))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*cols):
            w.writerow([_fmt(v) for v in row])


def read_components_csv(path, *, with_residue: bool | None = None):
    """Read ``t,imf1..imfM[,residue]``.

    Returns ``(t, components, residue)``; ``residue`` is None when the file
    has no residue column.
    """
    header, rows = _read_rows(path)
    has_res = header[-1] == "residue"
    if with_residue is not None and has_res != with_residue:
        raise DataIngestionError(
            f"{path}: residue column {'missing' if with_residue else 'unexpected'}")
    imf_cols = header[1:-1] if has_res else header[1:]
    expected = [f"imf{i + 1}" for i in range(len(imf_cols))]
    if header[0] != "t" or imf_cols != expected or not imf_cols:
        raise DataIngestionError(f"{path}: expected header 't,imf1,...,imfM[,residue]'")
    data = np.empty((len(rows), len(header)))
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise DataIngestionError(f"{path}:{i + 2}: expected {len(header)} columns")
        data[i] = [_parse_float(c, path, i + 2) for c in row]
    t = data[:, 0]
    comps = data[:, 1:1 + len(imf_cols)].T.copy()
    residue = data[:, -1].copy() if has_res else None
    return t, comps, residue
