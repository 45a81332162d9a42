"""Core data containers: time grids and aligned stock/option trajectory pairs."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import as_float_array, check_same_length

__all__ = ["TimeGrid", "PathPair"]

# Full-precision float formatting used by every CSV writer in the package so
# that serialized output round-trips exactly and runs are byte-reproducible.
FLOAT_FMT = "{:.17g}"


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing grid of observation times."""

    times: np.ndarray

    def __post_init__(self):
        times = as_float_array(self.times, "times")
        if len(times) < 2:
            raise ValueError("a time grid needs at least two points")
        if not np.all(np.diff(times) > 0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "times", times)

    @classmethod
    def uniform(cls, start, stop, n_steps):
        """Uniform grid with ``n_steps`` increments; endpoint is exact."""
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        times = np.linspace(float(start), float(stop), n_steps + 1)
        times[-1] = float(stop)
        return cls(times)

    @property
    def increments(self):
        return np.diff(self.times)

    @property
    def horizon(self):
        return float(self.times[-1])

    @property
    def n_steps(self):
        return len(self.times) - 1

    def __len__(self):
        return len(self.times)


@dataclass(frozen=True)
class PathPair:
    """Aligned discrete trajectories of a stock and its option price.

    ``stock[i]`` and ``option[i]`` are observed at ``grid.times[i]``.  Stock
    values must be strictly positive; option values may be any finite float
    (real quotes can be zero).
    """

    grid: TimeGrid
    stock: np.ndarray
    option: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        stock = as_float_array(self.stock, "stock")
        option = as_float_array(self.option, "option")
        check_same_length(times=self.grid.times, stock=stock, option=option)
        if not np.all(stock > 0):
            raise ValueError("stock values must be strictly positive")
        object.__setattr__(self, "stock", stock)
        object.__setattr__(self, "option", option)

    def __len__(self):
        return len(self.grid)

    @property
    def times(self):
        return self.grid.times

    def window(self, start, stop):
        """Sub-path with times in the closed interval [start, stop]."""
        mask = (self.times >= start) & (self.times <= stop)
        idx = np.flatnonzero(mask)
        if len(idx) < 2:
            raise ValueError(f"window [{start}, {stop}] selects fewer than 2 points")
        return self.slice(idx[0], idx[-1] + 1)

    def slice(self, lo, hi):
        return PathPair(TimeGrid(self.times[lo:hi]), self.stock[lo:hi], self.option[lo:hi], dict(self.meta))

    def check_terminal_payoff(self, strike, atol=0.0):
        """Verify the terminal option value equals the call payoff."""
        payoff = max(self.stock[-1] - strike, 0.0)
        if abs(self.option[-1] - payoff) > atol:
            raise ValueError(
                f"terminal option value {self.option[-1]} != payoff {payoff} (strike {strike})"
            )

    # -- serialization: CSV with header t,x,y at full double precision -------

    def to_csv(self, path_or_buf):
        if isinstance(path_or_buf, (str, Path)):
            with open(path_or_buf, "w", newline="") as fh:
                self._write_csv(fh)
        else:
            self._write_csv(path_or_buf)

    def _write_csv(self, fh):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "x", "y"])
        for t, x, y in zip(self.times, self.stock, self.option):
            writer.writerow([FLOAT_FMT.format(t), FLOAT_FMT.format(x), FLOAT_FMT.format(y)])

    @classmethod
    def from_csv(cls, path_or_buf):
        if isinstance(path_or_buf, (str, Path)):
            with open(path_or_buf, newline="") as fh:
                return cls._read_csv(fh)
        return cls._read_csv(path_or_buf)

    @classmethod
    def _read_csv(cls, fh):
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != ["t", "x", "y"]:
            raise ValueError(f"expected header 't,x,y', got {header!r}")
        rows = [(float(r[0]), float(r[1]), float(r[2])) for r in reader if r]
        t, x, y = (np.array(col) for col in zip(*rows))
        return cls(TimeGrid(t), x, y)

    def to_csv_string(self):
        buf = io.StringIO()
        self._write_csv(buf)
        return buf.getvalue()
