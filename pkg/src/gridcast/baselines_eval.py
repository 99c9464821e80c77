"""Reference predictors and the per-(city, channel) MSE table."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import WindowError
from .griddata import N_TARGETS, MovieDataset

SCALE = 1e3
SEASONAL_DAYS = 3
AVERAGE_WINDOW = 3


class BaselineKind(str, Enum):
    ZEROS = "zeros"
    NAIVE = "naive"
    SEASONAL = "seasonal"
    AVERAGE = "average"


def _frames(dataset, day, start, stop):
    per_day = dataset.frames_per_day
    if start < 0 or stop > per_day or day < 0 or day >= dataset.n_days:
        raise WindowError(
            f"missing frames: day {day}, slots [{start}, {stop}) (day has {per_day} slots, "
            f"movie has {dataset.n_days} days)"
        )
    return dataset.day_window(day, start, stop)


def baseline_predict(kind, dataset: MovieDataset, day: int, slot: int) -> np.ndarray:
    kind = BaselineKind(kind)
    H, W = dataset.grid
    C = dataset.channels
    if kind is BaselineKind.ZEROS:
        _frames(dataset, day, slot, slot + N_TARGETS)
        return np.zeros((N_TARGETS, H, W, C))
    if kind is BaselineKind.NAIVE:
        last = _frames(dataset, day, slot - 1, slot)[0]
        return np.repeat(last[None], N_TARGETS, axis=0)
    if kind is BaselineKind.SEASONAL:
        if day < SEASONAL_DAYS:
            raise WindowError(
                f"missing frames: seasonal prediction for day {day} needs days "
                f"{day - SEASONAL_DAYS}..{day - 1}"
            )
        past = [_frames(dataset, day - k, slot, slot + N_TARGETS) for k in range(1, SEASONAL_DAYS + 1)]
        return np.mean(past, axis=0)
    # running average; each forecast feeds the next window
    window = list(_frames(dataset, day, slot - AVERAGE_WINDOW, slot))
    out = []
    for _ in range(N_TARGETS):
        nxt = np.mean(window[-AVERAGE_WINDOW:], axis=0)
        out.append(nxt)
        window.append(nxt)
    return np.stack(out)


def baseline_predictor(kind):
    return lambda dataset, day, slot: baseline_predict(kind, dataset, day, slot)


def channel_names(C):
    return ["V", "S", "H"] if C == 3 else [f"c{i}" for i in range(C)]


def evaluate(predictor, dataset: MovieDataset, days, slots, threads=1,
             skip_missing=False) -> dict:
    """Per-channel MSE ×10³ over every (day, slot), predictions clamped to [0, 1].

    ``predictor(dataset, day, slot)`` returns [3, H, W, C]. With
    ``skip_missing`` examples whose context is unavailable are dropped.
    """
    pairs = [(d, s) for d in days for s in slots]

    def one(pair):
        d, s = pair
        try:
            pred = predictor(dataset, d, s)
        except WindowError:
            if skip_missing:
                return None
            raise
        target = dataset.day_window(d, s, s + N_TARGETS)
        err = np.clip(pred, 0.0, 1.0) - target
        return np.mean(err * err, axis=(0, 1, 2))

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            per_example = list(pool.map(one, pairs))
    else:
        per_example = [one(p) for p in pairs]
    per_example = [e for e in per_example if e is not None]
    if not per_example:
        raise WindowError("no evaluable examples")
    total = np.zeros(dataset.channels)
    for e in per_example:
        total = total + e
    mse = total / len(per_example) * SCALE
    return dict(zip(channel_names(dataset.channels), (float(x) for x in mse)))


@dataclass
class MetricTable:
    """Rows keyed by method; each row maps (city, channel) to MSE ×10³."""

    cities: list = field(default_factory=list)
    channels: list = field(default_factory=lambda: ["V", "S", "H"])
    rows: dict = field(default_factory=dict)

    def add(self, method, city, cells: dict):
        if city not in self.cities:
            self.cities.append(city)
        row = self.rows.setdefault(method, {})
        for ch, v in cells.items():
            if v < 0:
                raise ValueError(f"negative MSE {v} for {method}/{city}/{ch}")
            row[(city, ch)] = float(v)

    def city_mean(self, method, city):
        return float(np.mean([self.rows[method][(city, ch)] for ch in self.channels]))

    def overall_mean(self, method):
        return float(np.mean([self.rows[method][(c, ch)] for c in self.cities for ch in self.channels]))

    def header(self):
        cells = [f"{c} {ch}" for c in self.cities for ch in self.channels]
        return ["method", *cells, *(f"{c} mean" for c in self.cities), "mean"]

    def values(self, method):
        row = self.rows[method]
        cells = [row[(c, ch)] for c in self.cities for ch in self.channels]
        return [*cells, *(self.city_mean(method, c) for c in self.cities), self.overall_mean(method)]


def merge_tables(tables) -> MetricTable:
    if isinstance(tables, MetricTable):
        return tables
    tables = list(tables)
    if not tables:
        raise ValueError("nothing to report")
    out = MetricTable(channels=list(tables[0].channels))
    for t in tables:
        for method, row in t.rows.items():
            for (city, ch), v in row.items():
                out.add(method, city, {ch: v})
    return out


def emit_report(tables, fmt="markdown", path=None) -> str:
    """Render the table as CSV or markdown with 2-decimal cells."""
    table = merge_tables(tables)
    if not table.rows:
        raise ValueError("nothing to report")
    header = table.header()
    body = [[m, *(f"{v:.2f}" for v in table.values(m))] for m in table.rows]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(body)
        text = buf.getvalue()
    elif fmt == "markdown":
        lines = ["| " + " | ".join(header) + " |",
                 "|" + "|".join(["---"] + ["---:"] * (len(header) - 1)) + "|"]
        lines += ["| " + " | ".join(r) + " |" for r in body]
        text = "\n".join(lines) + "\n"
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def parse_markdown(text):
    """Inverse of the markdown rendering: (header, rows of strings)."""
    lines = [l.strip() for l in text.strip().splitlines()]
    split = lambda l: [c.strip() for c in l.strip("|").split("|")]
    return split(lines[0]), [split(l) for l in lines[2:]]
