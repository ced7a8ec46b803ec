"""Frame transport: rate/gap link models, virtual generator runs, and the
real-socket DAQ sink and traffic sender.

Virtual links are ideal: lossless, order-preserving, and exactly rate
limited, with the generator's inter-packet gap amortized continuously
(effective payload rate = rate * P / (P + G)). Real mode moves the same
serialized bytes over host-OS TCP; timing then comes from the wall clock
and only content is comparable across modes.
"""

from __future__ import annotations

import socket
import threading
import time
from dataclasses import dataclass

import numpy as np

from ._kernels import link_completions
from .board import payload_bytes
from .framing import ByteStreamDecoder, Frame, FramingError
from .measure import (DEFAULT_WINDOW_US, SampleSeries, ThroughputReport,
                      WindowAccumulator, summarize)

DEFAULT_SINK_PORT = 24577
DEFAULT_UDP_PORT = 24576

# P/(P+G) = 1527/2500 = 0.6108 reproduces the measured saturation plateau
# (6.108 Gbps on a 10 Gbps link)
PLATEAU_WORDS_PER_PACKET = 1527
PLATEAU_GAP_WORDS = 973


@dataclass(frozen=True)
class LinkModel:
    """Rate-limited word link with G idle words after every P payload words."""

    rate_bps: float
    words_per_packet: int = 1
    gap_words: int = 0

    def __post_init__(self):
        if self.rate_bps <= 0:
            raise ValueError("rate_bps must be positive")
        if self.words_per_packet < 1 or self.gap_words < 0:
            raise ValueError("need words_per_packet >= 1 and gap_words >= 0")

    @property
    def gap_fraction(self) -> float:
        return self.words_per_packet / (self.words_per_packet + self.gap_words)

    @property
    def effective_bps(self) -> float:
        return self.rate_bps * self.words_per_packet \
            / (self.words_per_packet + self.gap_words)

    def transfer_ns(self, nbytes: int) -> float:
        return nbytes * 8e9 / self.effective_bps


@dataclass(frozen=True)
class GeneratorSpec:
    """Word-clock traffic source: offered rate = clock * word_bits * duty."""

    clock_hz: float
    word_bits: int = 64
    duty: float = 1.0

    def __post_init__(self):
        if self.clock_hz < 0 or self.word_bits <= 0:
            raise ValueError("bad generator clock/word width")
        if not 0.0 <= self.duty <= 1.0:
            raise ValueError("duty must be within [0, 1]")

    @property
    def offered_bps(self) -> float:
        return self.clock_hz * self.word_bits * self.duty


def offered_rate(spec: GeneratorSpec) -> float:
    return spec.offered_bps


def virtual_link_transfer(link: LinkModel, ready_ns, sizes_bytes,
                          busy0_ns: float = 0.0) -> np.ndarray:
    """Completion times of frames pushed through a virtual link.

    ``ready_ns[i]`` is when frame i is available at the link input; the link
    serves one frame at a time at its effective rate. Lossless and
    order-preserving by construction.
    """
    ready = np.ascontiguousarray(ready_ns, dtype=np.float64)
    sizes = np.ascontiguousarray(sizes_bytes, dtype=np.float64)
    durs = sizes * (8e9 / link.effective_bps)
    return link_completions(ready, durs, busy0_ns)


# ---------------------------------------------------------------------------
# sink-side audit


@dataclass
class BoardAudit:
    frames: int = 0
    bytes: int = 0
    first_id: int | None = None
    last_id: int | None = None
    gap_frames: int = 0      # missing frame ids (drops upstream of the sink)
    disorder: int = 0        # ids that went backwards or repeated
    content_ok: int = 0
    content_repeat: int = 0  # identical payload replays (traffic generator)
    content_bad: int = 0

    @property
    def mode(self) -> str:
        if self.content_repeat and not self.content_bad:
            return "generator"
        return "board"

    def to_dict(self) -> dict:
        return {
            "frames": self.frames, "bytes": self.bytes,
            "first_id": self.first_id, "last_id": self.last_id,
            "gap_frames": self.gap_frames, "disorder": self.disorder,
            "content_ok": self.content_ok,
            "content_repeat": self.content_repeat,
            "content_bad": self.content_bad,
            "mode": self.mode,
        }


class SinkAudit:
    """Per-board frame-id sequence and payload-content bookkeeping.

    Content checking regenerates the keyed payload expected for each
    (board, frame) pair; a payload equal to the first one seen from a board
    is classified as a generator-style repeat instead of corruption.
    ``content_check`` may be "auto" or "off".
    """

    def __init__(self, seed: int = 0, content_check: str = "auto"):
        if content_check not in ("auto", "off"):
            raise ValueError("content_check must be 'auto' or 'off'")
        self.seed = seed
        self.content_check = content_check
        self.boards: dict[int, BoardAudit] = {}
        self._repeat_ref: dict[int, bytes] = {}
        self.total_frames = 0
        self.total_bytes = 0

    def add(self, frame: Frame) -> None:
        audit = self.boards.get(frame.board_id)
        if audit is None:
            audit = self.boards[frame.board_id] = BoardAudit()
        audit.frames += 1
        audit.bytes += frame.serialized_size
        self.total_frames += 1
        self.total_bytes += frame.serialized_size
        fid = frame.frame_id
        if audit.first_id is None:
            audit.first_id = fid
        elif fid > audit.last_id + 1:
            audit.gap_frames += fid - audit.last_id - 1
        elif fid <= audit.last_id:
            audit.disorder += 1
        audit.last_id = fid

        if self.content_check == "off":
            return
        expect = payload_bytes(self.seed, frame.board_id, fid, len(frame.payload))
        if frame.payload == expect:
            audit.content_ok += 1
        elif frame.payload == self._repeat_ref.get(frame.board_id):
            audit.content_repeat += 1
        else:
            audit.content_bad += 1
        self._repeat_ref.setdefault(frame.board_id, frame.payload)

    def verify_conservation(self, generated: dict[int, int],
                            overflowed: dict[int, int]) -> list[str]:
        """Check sink totals against producer counters; returns problems."""
        problems = []
        for bid, ngen in sorted(generated.items()):
            audit = self.boards.get(bid, BoardAudit())
            lost = overflowed.get(bid, 0)
            if audit.frames + lost != ngen:
                problems.append(
                    f"board {bid}: delivered {audit.frames} + overflowed "
                    f"{lost} != generated {ngen}")
            if audit.gap_frames != lost:
                problems.append(
                    f"board {bid}: id gaps {audit.gap_frames} != "
                    f"overflow count {lost}")
            if audit.disorder:
                problems.append(f"board {bid}: {audit.disorder} out-of-order ids")
            if audit.content_bad:
                problems.append(f"board {bid}: {audit.content_bad} corrupt payloads")
        for bid in sorted(set(self.boards) - set(generated)):
            problems.append(f"board {bid}: frames from unknown board")
        return problems

    def to_dict(self) -> dict:
        return {
            "total_frames": self.total_frames,
            "total_bytes": self.total_bytes,
            "boards": {str(b): a.to_dict() for b, a in sorted(self.boards.items())},
        }


def empty_report(window_us: float) -> ThroughputReport:
    return ThroughputReport(window_us=window_us, n_windows=0, total_bytes=0,
                            duration_s=0.0, mean_bps=0.0, stddev_bps=0.0,
                            min_bps=0.0, max_bps=0.0, hist_lo_bps=0.0,
                            hist_hi_bps=0.0, hist_counts=[])


# ---------------------------------------------------------------------------
# virtual generator runs (the linearity / saturation experiments)


@dataclass
class GeneratorRunResult:
    series: SampleSeries
    report: ThroughputReport
    frames: int
    bytes: int
    duration_s: float


def run_generator_virtual(spec: GeneratorSpec, link: LinkModel,
                          duration_s: float, frame_payload_bytes: int = 1024,
                          window_us: float = DEFAULT_WINDOW_US,
                          chunk_frames: int = 1 << 20) -> GeneratorRunResult:
    """Stream repeating frames from a generator through one virtual link for
    ``duration_s`` of virtual time, sampling arrivals at the sink.

    Frame timing is computed in closed form chunk by chunk, so runs of
    millions of frames stay cheap; the arithmetic is the same store-and-
    forward recurrence the event-driven chain uses.
    """
    frame_bytes = frame_payload_bytes + 32
    duration_ns = duration_s * 1e9
    acc = WindowAccumulator(window_us)
    offered = spec.offered_bps
    nframes = 0
    if offered > 0:
        gen_ns = frame_bytes * 8e9 / offered
        dur = np.full(chunk_frames, link.transfer_ns(frame_bytes))
        sizes = np.full(chunk_frames, frame_bytes, dtype=np.int64)
        busy = 0.0
        k0 = 0
        while True:
            ready = (np.arange(k0 + 1, k0 + chunk_frames + 1,
                               dtype=np.float64)) * gen_ns
            if ready[0] > duration_ns:
                break
            comps = link_completions(ready, dur, busy)
            if comps[-1] > duration_ns:
                keep = int(np.searchsorted(comps, duration_ns, side="right"))
                acc.add_array(comps[:keep], sizes[:keep])
                nframes += keep
                break
            acc.add_array(comps, sizes)
            nframes += chunk_frames
            busy = comps[-1]
            k0 += chunk_frames
    series = acc.series(duration_ns=duration_ns)
    report = (summarize(series, hist_max_bps=link.rate_bps)
              if len(series) else empty_report(window_us))
    return GeneratorRunResult(series, report, nframes,
                              nframes * frame_bytes, duration_s)


# ---------------------------------------------------------------------------
# real-socket DAQ sink


@dataclass
class SinkResult:
    series: SampleSeries
    report: ThroughputReport
    audit: SinkAudit
    framing_errors: list[FramingError]
    frames: int
    bytes: int
    duration_s: float
    clean_close: bool
    collected: list[Frame] | None = None


class SinkServer:
    """TCP server receiving one frame stream and measuring it.

    Arrival timestamps have recv-chunk granularity, which is fine for mean
    rates; virtual mode is the tool for exact per-window statistics.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 window_us: float = DEFAULT_WINDOW_US, seed: int = 0,
                 content_check: str = "auto",
                 hist_max_bps: float | None = None,
                 collect_frames: bool = False):
        self.window_us = window_us
        self.seed = seed
        self.content_check = content_check
        self.hist_max_bps = hist_max_bps
        self.collect_frames = collect_frames
        self.stop_event = threading.Event()
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(1)
        self._sock.settimeout(0.1)

    @property
    def endpoint(self) -> tuple[str, int]:
        return self._sock.getsockname()

    def stop(self) -> None:
        self.stop_event.set()

    def serve_one(self, accept_timeout: float | None = None) -> SinkResult:
        """Accept one connection and receive until close or stop()."""
        deadline = None if accept_timeout is None \
            else time.monotonic() + accept_timeout
        conn = None
        try:
            while conn is None:
                if self.stop_event.is_set():
                    return self._finalize(WindowAccumulator(self.window_us),
                                          ByteStreamDecoder(),
                                          self._fresh_audit(), True)
                if deadline is not None and time.monotonic() > deadline:
                    raise TimeoutError("no client connected")
                try:
                    conn, _ = self._sock.accept()
                except socket.timeout:
                    continue
            conn.settimeout(0.1)
            decoder = ByteStreamDecoder()
            acc = WindowAccumulator(self.window_us)
            audit = self._fresh_audit()
            collected = [] if self.collect_frames else None
            t0 = None
            clean = True
            while True:
                if self.stop_event.is_set():
                    break
                try:
                    data = conn.recv(1 << 18)
                except socket.timeout:
                    continue
                except (ConnectionResetError, OSError):
                    clean = False
                    break
                if not data:
                    break
                now = time.monotonic_ns()
                if t0 is None:
                    t0 = now
                for frame in decoder.feed(data):
                    acc.add(now - t0, frame.serialized_size)
                    audit.add(frame)
                    if collected is not None:
                        collected.append(frame)
            return self._finalize(acc, decoder, audit, clean, collected)
        finally:
            if conn is not None:
                conn.close()
            self._sock.close()

    def _fresh_audit(self) -> SinkAudit:
        return SinkAudit(self.seed, self.content_check)

    def _finalize(self, acc, decoder, audit, clean,
                  collected=None) -> SinkResult:
        decoder.finish()
        series = acc.series()
        report = (summarize(series, hist_max_bps=self.hist_max_bps)
                  if len(series) else empty_report(self.window_us))
        return SinkResult(series=series, report=report, audit=audit,
                          framing_errors=list(decoder.errors),
                          frames=audit.total_frames, bytes=acc.total_bytes,
                          duration_s=series.duration_s, clean_close=clean,
                          collected=collected)


def serve_sink(host: str = "127.0.0.1", port: int = DEFAULT_SINK_PORT,
               window_us: float = DEFAULT_WINDOW_US, seed: int = 0,
               content_check: str = "auto",
               accept_timeout: float | None = None) -> SinkResult:
    """One-shot: bind, accept one stream, decode, measure, audit."""
    return SinkServer(host, port, window_us, seed,
                      content_check).serve_one(accept_timeout)


# ---------------------------------------------------------------------------
# real-socket traffic generator


@dataclass
class TrafficSummary:
    frames_sent: int
    bytes_sent: int
    wall_s: float
    offered_bps: float
    achieved_bps: float


def send_traffic(target: tuple[str, int], spec: GeneratorSpec,
                 duration_s: float, frame_payload_bytes: int = 8192,
                 gap_fraction: float = 1.0, board_id: int = 0xFEED,
                 seed: int = 0, connect_timeout: float = 5.0) -> TrafficSummary:
    """Send repeating-payload frames at the spec's rate over TCP.

    The payload is generated once and repeated with incrementing frame ids.
    Pacing is deadline-based (bytes owed by elapsed wall time), so the
    long-run rate tracks ``offered * gap_fraction`` regardless of sleep
    jitter.
    """
    if not 0.0 < gap_fraction <= 1.0:
        raise ValueError("gap_fraction must be in (0, 1]")
    pace_bps = spec.offered_bps * gap_fraction
    payload = payload_bytes(seed, board_id, 0, frame_payload_bytes)
    sock = socket.create_connection(target, timeout=connect_timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    frames = 0
    sent = 0
    t0 = time.monotonic()
    try:
        while True:
            now = time.monotonic() - t0
            if now >= duration_s:
                break
            if pace_bps <= 0:
                time.sleep(min(0.01, duration_s - now))
                continue
            owed = pace_bps * now / 8 - sent
            if owed <= 0:
                time.sleep(min(0.002, duration_s - now))
                continue
            while owed > 0 and time.monotonic() - t0 < duration_s:
                raw = Frame(board_id, frames & 0xFFFFFFFF, 0, payload).to_bytes()
                sock.sendall(raw)
                frames += 1
                sent += len(raw)
                owed -= len(raw)
    finally:
        sock.close()
    wall = time.monotonic() - t0
    achieved = sent * 8 / wall if wall > 0 else 0.0
    return TrafficSummary(frames, sent, wall, spec.offered_bps, achieved)
