"""Windowed throughput measurement: 100 us byte counters, reports, sweeps.

Arrivals are credited whole to the window containing their completion
time; windows are contiguous, fixed width, and zero-byte windows are kept
so gaps stay visible. Rates count serialized frame bytes (frame-layer
goodput), not transport headers.

CSV schema: header ``window_index,t_start_us,bytes,rate_bps``, one row per
window, RFC-4180. The JSON report schema is documented in the README.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels

DEFAULT_WINDOW_US = 100.0


class NonMonotonicTime(ValueError):
    """Arrival timestamps decreased."""


class Empty(ValueError):
    """No samples to summarize."""


@dataclass(frozen=True)
class ThroughputSample:
    window_index: int
    t_start_us: float
    bytes: int
    rate_bps: float


class SampleSeries:
    """Per-window byte counts; the columnar form of a sample list."""

    def __init__(self, window_us: float, byte_counts: np.ndarray):
        self.window_us = float(window_us)
        self.byte_counts = np.asarray(byte_counts, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.byte_counts)

    @property
    def window_seconds(self) -> float:
        return self.window_us * 1e-6

    @property
    def total_bytes(self) -> int:
        return int(self.byte_counts.sum())

    @property
    def duration_s(self) -> float:
        return len(self) * self.window_seconds

    def rates_bps(self) -> np.ndarray:
        return self.byte_counts * (8e6 / self.window_us)

    def samples(self) -> list[ThroughputSample]:
        rates = self.rates_bps()
        return [ThroughputSample(i, i * self.window_us, int(b), float(r))
                for i, (b, r) in enumerate(zip(self.byte_counts, rates))]


class WindowAccumulator:
    """Incremental arrival binning; times in nanoseconds from the run origin."""

    def __init__(self, window_us: float = DEFAULT_WINDOW_US):
        if window_us <= 0:
            raise ValueError("window must be positive")
        self.window_us = float(window_us)
        self.window_ns = float(window_us) * 1000.0
        self._bins = np.zeros(0, dtype=np.int64)
        self.total_bytes = 0

    def _grow(self, nwin: int) -> None:
        if nwin > len(self._bins):
            grown = np.zeros(max(nwin, 2 * len(self._bins)), dtype=np.int64)
            grown[:len(self._bins)] = self._bins
            self._bins = grown

    def add(self, t_ns: float, nbytes: int) -> None:
        idx = int(t_ns // self.window_ns)
        if idx < 0:
            raise ValueError("negative arrival time")
        self._grow(idx + 1)
        self._bins[idx] += nbytes
        self.total_bytes += nbytes

    def add_array(self, t_ns: np.ndarray, nbytes: np.ndarray) -> None:
        if len(t_ns) == 0:
            return
        nwin = int(np.max(t_ns) // self.window_ns) + 1
        self._grow(nwin)
        self._bins[:nwin] += _kernels.window_sums(t_ns, nbytes,
                                                  self.window_ns, nwin)
        self.total_bytes += int(np.sum(nbytes))

    @property
    def n_windows(self) -> int:
        """Windows observed so far (index of last hit window + 1)."""
        hits = np.nonzero(self._bins)[0]
        return int(hits[-1]) + 1 if len(hits) else 0

    def series(self, duration_ns: float | None = None) -> SampleSeries:
        """Snapshot as a series; with ``duration_ns``, pad with zero windows
        so the series spans at least the full run."""
        n = self.n_windows
        if duration_ns is not None:
            n = max(n, math.ceil(duration_ns / self.window_ns))
        self._grow(n)
        return SampleSeries(self.window_us, self._bins[:n].copy())


def sample_stream(arrivals, window_us: float = DEFAULT_WINDOW_US) -> list[ThroughputSample]:
    """Bin an arrival stream of (time_us, nbytes) pairs into windows.

    Times must be non-decreasing; every window from 0 through the one
    holding the last arrival is emitted, zeros included.
    """
    if isinstance(arrivals, tuple) and len(arrivals) == 2 \
            and isinstance(arrivals[0], np.ndarray):
        t_us = np.asarray(arrivals[0], dtype=np.float64)
        sizes = np.asarray(arrivals[1], dtype=np.int64)
    else:
        pairs = list(arrivals)
        t_us = np.array([p[0] for p in pairs], dtype=np.float64)
        sizes = np.array([p[1] for p in pairs], dtype=np.int64)
    if len(t_us) and np.any(np.diff(t_us) < 0):
        raise NonMonotonicTime("arrival times decreased")
    acc = WindowAccumulator(window_us)
    acc.add_array(t_us * 1000.0, sizes)
    return acc.series().samples()


@dataclass
class ThroughputReport:
    window_us: float
    n_windows: int
    total_bytes: int
    duration_s: float
    mean_bps: float
    stddev_bps: float
    min_bps: float
    max_bps: float
    hist_lo_bps: float
    hist_hi_bps: float
    hist_counts: list[int]

    def to_dict(self) -> dict:
        return {
            "schema": "pixelchain-report-v1",
            "window_us": self.window_us,
            "n_windows": self.n_windows,
            "total_bytes": self.total_bytes,
            "duration_s": self.duration_s,
            "mean_bps": self.mean_bps,
            "stddev_bps": self.stddev_bps,
            "min_bps": self.min_bps,
            "max_bps": self.max_bps,
            "histogram": {
                "lo_bps": self.hist_lo_bps,
                "hi_bps": self.hist_hi_bps,
                "counts": self.hist_counts,
            },
        }

    def to_text(self) -> str:
        lines = [
            f"windows        {self.n_windows} x {self.window_us:g} us",
            f"duration       {self.duration_s:.6f} s",
            f"total bytes    {self.total_bytes}",
            f"mean rate      {self.mean_bps / 1e9:.6f} Gbps",
            f"stddev         {self.stddev_bps / 1e9:.6f} Gbps",
            f"min/max        {self.min_bps / 1e9:.6f} / {self.max_bps / 1e9:.6f} Gbps",
        ]
        return "\n".join(lines) + "\n"


def summarize(series, hist_bins: int = 64, hist_max_bps: float | None = None,
              window_us: float | None = None) -> ThroughputReport:
    """Report over samples: mean/stddev/extremes plus a rate histogram."""
    if isinstance(series, list):
        if not series:
            raise Empty("no samples")
        if window_us is None:
            window_us = (series[1].t_start_us - series[0].t_start_us
                         if len(series) > 1 else DEFAULT_WINDOW_US)
        counts = np.array([s.bytes for s in series], dtype=np.int64)
        series = SampleSeries(window_us, counts)
    if len(series) == 0:
        raise Empty("no samples")
    rates = series.rates_bps()
    total = series.total_bytes
    duration = series.duration_s
    mean = total * 8 / duration
    hi = float(hist_max_bps) if hist_max_bps else float(rates.max()) or 1.0
    counts, _ = np.histogram(rates, bins=hist_bins, range=(0.0, hi))
    return ThroughputReport(
        window_us=series.window_us,
        n_windows=len(series),
        total_bytes=total,
        duration_s=duration,
        mean_bps=mean,
        stddev_bps=float(rates.std()),
        min_bps=float(rates.min()),
        max_bps=float(rates.max()),
        hist_lo_bps=0.0,
        hist_hi_bps=hi,
        hist_counts=[int(c) for c in counts],
    )


def _fmt(x: float) -> str:
    if x == int(x):
        return str(int(x))
    return repr(x)


def write_csv(series: SampleSeries, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["window_index", "t_start_us", "bytes", "rate_bps"])
        rates = series.rates_bps()
        for i, (b, r) in enumerate(zip(series.byte_counts, rates)):
            out.writerow([i, _fmt(i * series.window_us), int(b), _fmt(float(r))])


def write_report(report: ThroughputReport, json_path, text_path=None,
                 extra: dict | None = None) -> None:
    doc = report.to_dict()
    if extra:
        doc.update(extra)
    with open(json_path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if text_path is not None:
        with open(text_path, "w") as fh:
            fh.write(report.to_text())


@dataclass
class SweepPoint:
    offered_bps: float
    measured_bps: float | None
    ratio: float | None
    error: str | None = None


def linearity_sweep(offered_bps, duration_s: float, link,
                    frame_payload_bytes: int = 1024,
                    window_us: float = DEFAULT_WINDOW_US) -> list[SweepPoint]:
    """Run the virtual generator at each offered rate through ``link`` and
    tabulate measured mean vs offered. Per-point failures are recorded and
    the sweep continues."""
    from .transport import GeneratorSpec, run_generator_virtual

    points = []
    for offered in offered_bps:
        if offered < 0:
            points.append(SweepPoint(offered, None, None, "negative rate"))
            continue
        if offered == 0:
            points.append(SweepPoint(0.0, 0.0, 1.0))
            continue
        try:
            spec = GeneratorSpec(clock_hz=offered / 64.0, word_bits=64, duty=1.0)
            res = run_generator_virtual(spec, link, duration_s,
                                        frame_payload_bytes, window_us)
            measured = res.report.mean_bps
            points.append(SweepPoint(float(offered), measured,
                                     measured / offered))
        except Exception as err:  # record, keep sweeping
            points.append(SweepPoint(float(offered), None, None, str(err)))
    return points


def write_sweep_csv(points: list[SweepPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["offered_bps", "measured_bps", "ratio", "error"])
        for p in points:
            out.writerow([_fmt(p.offered_bps),
                          "" if p.measured_bps is None else _fmt(p.measured_bps),
                          "" if p.ratio is None else repr(p.ratio),
                          p.error or ""])
