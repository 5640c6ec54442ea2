"""Univariate time-series ingestion and forecasting task construction.

CSV in, chronological train/val/test split out, with y standardized by
training-split statistics only and per-window x rescaled to [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .tasks import TaskBatch


def load_series_csv(path):
    """Parse a two-column numeric CSV into (t, y) arrays.

    An initial non-numeric row is treated as a header. t must be strictly
    increasing; violations are reported with their line number.
    """
    ts, ys = [], []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    if not lines:
        raise DataError(f"{path}: empty file")
    start = 0
    first = lines[0].strip()
    if first:
        cells = first.split(",")
        try:
            float(cells[0])
        except ValueError:
            start = 1
    for lineno, line in enumerate(lines[start:], start=start + 1):
        text = line.strip()
        if not text:
            continue
        cells = text.split(",")
        if len(cells) < 2:
            raise DataError(f"{path}:{lineno}: expected two columns, got {text!r}")
        try:
            t = float(cells[0])
            y = float(cells[1])
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric row {text!r}") from None
        if ts and t <= ts[-1]:
            raise DataError(
                f"{path}:{lineno}: time column must be strictly increasing "
                f"({t} after {ts[-1]})"
            )
        ts.append(t)
        ys.append(y)
    if not ts:
        raise DataError(f"{path}: no data rows")
    return np.asarray(ts, dtype=np.float64), np.asarray(ys, dtype=np.float64)


def write_series_csv(path, t, y, header=("t", "y")):
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(",".join(header) + "\n")
        for ti, yi in zip(t, y):
            fh.write(f"{float(ti)!r},{float(yi)!r}\n")


def synth_sine_series(count, period, noise, rng):
    """y = sin(2 pi t / period) + Gaussian noise on an integer time grid."""
    t = np.arange(count, dtype=np.float64)
    y = np.sin(2.0 * np.pi * t / period) + noise * rng.standard_normal(count)
    return t, y


def chronological_split(n, ratios):
    """Index boundaries for a (train, val, test) split of n points."""
    r_train, r_val, r_test = ratios
    total = r_train + r_val + r_test
    if abs(total - 1.0) > 1e-9:
        raise DataError(f"split ratios must sum to 1, got {ratios}")
    n_train = int(n * r_train)
    n_val = int(n * r_val)
    return n_train, n_train + n_val


def _window(t, y, start, n_context, n_target):
    length = n_context + n_target
    tw = t[start : start + length]
    span = tw[-1] - tw[0]
    x = -1.0 + 2.0 * (tw - tw[0]) / span
    return TaskBatch(
        x.reshape(1, length, 1),
        y[start : start + length].reshape(1, length, 1),
        n_context,
        n_target,
    )


@dataclass
class ForecastSplit:
    """Windowed tasks per split plus the standardization statistics."""

    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)
    y_mean: float = 0.0
    y_std: float = 1.0


def make_forecast_tasks(
    t,
    y,
    n_context,
    n_target,
    ratios=(0.72, 0.08, 0.20),
    train_windows=2000,
    rng=None,
    stats=None,
):
    """Chronological split, standardization, and window extraction.

    Training windows start at random positions inside the training region;
    validation and test windows are strided by n_target so their targets do
    not overlap. Windows never cross a split boundary. `stats` overrides
    the (mean, std) pair, e.g. to score a new series on a trained model's
    training statistics.
    """
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(t)
    length = n_context + n_target
    b_val, b_test = chronological_split(n, ratios)
    bounds = [(0, b_val), (b_val, b_test), (b_test, n)]
    for name, (lo, hi) in zip(("train", "val", "test"), bounds):
        if hi - lo < length:
            raise DataError(
                f"{name} split holds {hi - lo} points, shorter than one "
                f"window of {length}"
            )
    if stats is not None:
        y_mean, y_std = float(stats[0]), float(stats[1])
    else:
        y_mean = float(y[:b_val].mean())
        y_std = float(y[:b_val].std())
    if y_std == 0.0:
        raise DataError("training split is constant; cannot standardize")
    ys = (y - y_mean) / y_std

    if rng is None:
        rng = np.random.default_rng(0)
    out = ForecastSplit(y_mean=y_mean, y_std=y_std)
    starts = rng.integers(0, b_val - length + 1, size=train_windows)
    out.train = [_window(t, ys, int(s), n_context, n_target) for s in starts]
    for tasks, (lo, hi) in zip((out.val, out.test), bounds[1:]):
        for s in range(lo, hi - length + 1, n_target):
            tasks.append(_window(t, ys, s, n_context, n_target))
    return out
