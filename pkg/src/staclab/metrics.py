"""Metrics CSV files and their aggregation across seeds."""

import csv
import math
import os

import numpy as np

BASE_COLUMNS = (
    "step",
    "version",
    "wall_time",
    "episodes",
    "return_mean",
    "return_std",
    "inner_loss",
    "outer_loss",
    "metagrad_norm",
    "staleness_mean",
    "staleness_max",
)


class MetricsFileError(OSError):
    pass


def meta_columns(num_heads, names):
    return tuple(f"head{p}/{n}" for p in range(num_heads) for n in names)


class MetricsWriter:
    """Append-only CSV; every row is flushed so the file parses after a crash."""

    def __init__(self, path, columns):
        self.path = path
        self.columns = tuple(columns)
        self._fh = open(path, "w", newline="")
        self._writer = csv.DictWriter(self._fh, fieldnames=self.columns, extrasaction="ignore")
        self._writer.writeheader()
        self._fh.flush()
        self._last_step = -1

    def write(self, row):
        if row["step"] <= self._last_step:
            raise ValueError("metrics steps must increase")
        self._last_step = row["step"]
        self._writer.writerow({k: _fmt(row.get(k, "")) for k in self.columns})
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def close(self):
        self._fh.close()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def read_metrics(path):
    """Columns of a metrics CSV as float arrays; a torn final line is dropped."""
    if not os.path.exists(path):
        raise MetricsFileError(f"metrics file not found: {path}")
    with open(path, newline="") as fh:
        text = fh.read()
    lines = text.splitlines()
    if not lines:
        raise MetricsFileError(f"empty metrics file: {path}")
    if not text.endswith("\n"):
        lines = lines[:-1]
    reader = csv.DictReader(lines)
    cols = {k: [] for k in reader.fieldnames}
    for row in reader:
        if None in row.values() or len(row) != len(cols):
            continue
        for k, v in row.items():
            cols[k].append(float(v) if v not in ("", None) else math.nan)
    return {k: np.array(v) for k, v in cols.items()}


def aggregate(series_list, key="step"):
    """Mean and standard deviation across seeds, aligned on the shortest run.

    Returns a dict with ``key`` plus ``<col>_mean`` / ``<col>_std`` for every
    other column (std is the population standard deviation; 0 for one seed).
    """
    if not series_list:
        raise ValueError("nothing to aggregate")
    n = min(len(s[key]) for s in series_list)
    steps = series_list[0][key][:n]
    for s in series_list[1:]:
        if not np.array_equal(s[key][:n], steps):
            raise ValueError("runs were logged at different steps")
    out = {key: steps}
    for col in series_list[0]:
        if col == key:
            continue
        stack = np.stack([s[col][:n] for s in series_list])
        out[f"{col}_mean"] = stack.mean(0)
        out[f"{col}_std"] = stack.std(0)
    return out


def write_columns(path, columns):
    keys = list(columns)
    n = len(columns[keys[0]])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for i in range(n):
            w.writerow([_fmt(float(columns[k][i])) for k in keys])


def plot_series(path, agg, columns, key="step", title=None):
    """Mean curves with +/- one std bands, saved as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    x = agg[key]
    for col in columns:
        mean = agg.get(f"{col}_mean", agg.get(col))
        std = agg.get(f"{col}_std")
        ax.plot(x, mean, label=col)
        if std is not None:
            ax.fill_between(x, mean - std, mean + std, alpha=0.2)
    ax.set_xlabel(key)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
