"""Daisy-chain execution: virtual (event-driven) and real (threads+sockets).

Both runners build the same board pipeline: per-board generator -> bounded
FIFO -> polling arbiter merging the upstream neighbour -> egress link, with
the tail board feeding the sink. Virtual mode advances an integer-ns event
clock and is bit-reproducible for a given topology+seed; real mode paces
with the host monotonic clock, carries the tail stream over TCP, and serves
register access on real UDP ports. Content (frame bytes per board) is
identical across modes; timing and interleaving are not.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass

from . import regproto
from .board import Board, RATE_MODE, TRIGGER_MODE
from .framing import Frame
from .measure import WindowAccumulator, summarize
from .regproto import RegClient, RegServer, write_request
from .sim import Channel, VirtualClock
from .topology import ChainTopology, RegWrite
from .transport import SinkAudit, SinkServer, empty_report


@dataclass
class BoardStats:
    board_id: int
    generated_frames: int
    generated_bytes: int
    overflow_count: int
    fifo_max_occupancy_bytes: int
    fifo_capacity_bytes: int
    first_overflow_us: float | None = None


@dataclass
class RegLogEntry:
    t_us: float
    board_id: int
    addr: int
    values: tuple[int, ...]
    ok: bool
    detail: str = ""


@dataclass
class ChainRunResult:
    mode: str
    series: object
    report: object
    audit: SinkAudit
    board_stats: list[BoardStats]
    reg_log: list[RegLogEntry]
    problems: list[str]
    framing_error_count: int
    duration_s: float
    wall_s: float
    frames: list[Frame] | None = None

    @property
    def audit_passed(self) -> bool:
        return not self.problems and self.framing_error_count == 0

    def audit_dict(self) -> dict:
        return {
            "schema": "pixelchain-audit-v1",
            "mode": self.mode,
            "passed": self.audit_passed,
            "problems": self.problems,
            "framing_errors": self.framing_error_count,
            "sink": self.audit.to_dict(),
            "boards": [{
                "board_id": s.board_id,
                "generated_frames": s.generated_frames,
                "generated_bytes": s.generated_bytes,
                "overflow_count": s.overflow_count,
                "fifo_max_occupancy_bytes": s.fifo_max_occupancy_bytes,
                "fifo_capacity_bytes": s.fifo_capacity_bytes,
                "first_overflow_us": s.first_overflow_us,
            } for s in self.board_stats],
            "register_writes": [{
                "t_us": e.t_us, "board_id": e.board_id, "addr": e.addr,
                "values": list(e.values), "ok": e.ok, "detail": e.detail,
            } for e in self.reg_log],
        }


def _verify(audit: SinkAudit, boards: list[Board]) -> list[str]:
    generated = {b.config.board_id: b.generated_frames for b in boards}
    overflowed = {b.config.board_id: b.fifo.overflow_count for b in boards}
    return audit.verify_conservation(generated, overflowed)


def _stats(boards: list[Board],
           first_overflow_ns: dict[int, float] | None = None) -> list[BoardStats]:
    firsts = first_overflow_ns or {}
    return [BoardStats(
        board_id=b.config.board_id,
        generated_frames=b.generated_frames,
        generated_bytes=b.generated_bytes,
        overflow_count=b.fifo.overflow_count,
        fifo_max_occupancy_bytes=b.fifo.max_occupancy_bytes,
        fifo_capacity_bytes=b.fifo.capacity_bytes,
        first_overflow_us=(firsts[b.config.board_id] / 1000.0
                           if b.config.board_id in firsts else None),
    ) for b in boards]


# ---------------------------------------------------------------------------
# virtual mode


class _VNode:
    __slots__ = ("board", "link", "downstream", "sending", "t_free_f",
                 "gen_epoch", "next_gen_f")

    def __init__(self, board, link):
        self.board = board
        self.link = link
        self.downstream: Channel | None = None
        self.sending = False
        self.t_free_f = 0.0
        self.gen_epoch = 0
        self.next_gen_f = 0.0


class VirtualChainRun:
    """Deterministic virtual-time execution of one topology."""

    def __init__(self, topo: ChainTopology, collect_frames: bool = False):
        topo.validate()
        self.topo = topo
        self.clock = VirtualClock()
        self.duration_ns = int(topo.duration_s * 1e9)
        self.acc = WindowAccumulator(topo.window_us)
        self.audit = SinkAudit(topo.seed, topo.content_check)
        self.reg_log: list[RegLogEntry] = []
        self.problems: list[str] = []
        self.collected: list[Frame] | None = [] if collect_frames else None
        self.first_overflow_ns: dict[int, float] = {}
        self._last_arrival = 0.0
        self._seq = 0
        self.nodes: list[_VNode] = []
        for i, spec in enumerate(topo.boards):
            board = Board(spec.config, seed=topo.seed, window_us=topo.window_us)
            node = _VNode(board, topo.out_link_for(i))
            board.on_register_write = \
                lambda addrs, idx=i: self._regs_changed(idx, addrs)
            self.nodes.append(node)
        for i in range(1, len(self.nodes)):
            ch = Channel(capacity=2)
            self.nodes[i].board.upstream = ch
            self.nodes[i - 1].downstream = ch

    # -- register plumbing -------------------------------------------------

    def _do_reg_write(self, idx: int, addr: int, values: tuple[int, ...]):
        node = self.nodes[idx]
        self._seq = (self._seq + 1) % 256
        packet = write_request(self._seq, addr, values)
        now = self.clock.now_ns
        try:
            reply = node.board.handle_reg_packet(packet, now)
        except regproto.InvalidPacket as err:
            entry = RegLogEntry(now / 1000.0, node.board.config.board_id,
                                addr, values, False, str(err))
        else:
            if reply.error:
                entry = RegLogEntry(now / 1000.0, node.board.config.board_id,
                                    addr, values, False,
                                    f"error {reply.error_code:#04x}")
            elif reply.data != values:
                entry = RegLogEntry(now / 1000.0, node.board.config.board_id,
                                    addr, values, False,
                                    f"read-back {reply.data}")
            else:
                entry = RegLogEntry(now / 1000.0, node.board.config.board_id,
                                    addr, values, True)
        self.reg_log.append(entry)
        if not entry.ok:
            self.problems.append(
                f"register write failed: board {entry.board_id} "
                f"addr {addr:#06x}: {entry.detail}")

    def _regs_changed(self, idx: int, addrs: list[int]) -> None:
        if regproto.DATA_RATE_CTRL in addrs:
            node = self.nodes[idx]
            if node.board.config.mode == RATE_MODE:
                node.gen_epoch += 1
                self._arm_rate_gen(idx)

    # -- generation ----------------------------------------------------------

    def _schedule_trigger(self, idx: int, k: int, period_f: float) -> None:
        t = int(k * period_f)
        if t >= self.duration_ns:
            return
        self.clock.at(t, lambda: self._trigger_tick(idx, k, period_f))

    def _note_overflow(self, idx: int) -> None:
        board = self.nodes[idx].board
        if board.fifo.overflow_count and \
                board.config.board_id not in self.first_overflow_ns:
            self.first_overflow_ns[board.config.board_id] = self.clock.now_ns

    def _trigger_tick(self, idx: int, k: int, period_f: float) -> None:
        self.nodes[idx].board.on_trigger_tick()
        self._note_overflow(idx)
        self._try_send(idx)
        self._schedule_trigger(idx, k + 1, period_f)

    def _arm_rate_gen(self, idx: int) -> None:
        node = self.nodes[idx]
        interval = node.board.gen_interval_ns()
        if interval is None:
            return
        node.next_gen_f = self.clock.now_ns + interval
        t = int(node.next_gen_f)
        if t >= self.duration_ns:
            return
        epoch = node.gen_epoch
        self.clock.at(t, lambda: self._rate_emit(idx, epoch))

    def _rate_emit(self, idx: int, epoch: int) -> None:
        node = self.nodes[idx]
        if epoch != node.gen_epoch:
            return  # stale schedule from before a rate change
        node.board.emit_rate_frame()
        self._note_overflow(idx)
        self._try_send(idx)
        interval = node.board.gen_interval_ns()
        if interval is None:
            return
        node.next_gen_f += interval
        t = int(node.next_gen_f)
        if t < self.duration_ns:
            self.clock.at(t, lambda: self._rate_emit(idx, epoch))

    # -- frame movement ------------------------------------------------------

    def _try_send(self, idx: int) -> None:
        node = self.nodes[idx]
        if node.sending:
            return
        if node.downstream is not None and not node.downstream.has_room:
            return
        picked = node.board.select_egress()
        if picked is None:
            return
        src, frame = picked
        node.sending = True
        if node.downstream is not None:
            node.downstream.reserve()
        now_f = float(self.clock.now_ns)
        start = node.t_free_f if node.t_free_f > now_f else now_f
        end = start + node.link.transfer_ns(frame.serialized_size)
        node.t_free_f = end
        self.clock.at(end, lambda: self._complete(idx, frame, end))
        if src == 0 and idx > 0:
            self._try_send(idx - 1)  # freed a slot in our upstream channel

    def _complete(self, idx: int, frame: Frame, end_f: float) -> None:
        node = self.nodes[idx]
        node.sending = False
        node.board.record_egress(end_f, frame.serialized_size)
        if node.downstream is None:
            self._sink(end_f, frame)
            self._try_send(idx)
        else:
            node.downstream.push(frame)
            self._try_send(idx)
            self._try_send(idx + 1)

    def _sink(self, t_f: float, frame: Frame) -> None:
        self.acc.add(t_f, frame.serialized_size)
        self.audit.add(frame)
        if self.collected is not None:
            self.collected.append(frame)
        if t_f > self._last_arrival:
            self._last_arrival = t_f

    # -- run -----------------------------------------------------------------

    def run(self) -> ChainRunResult:
        wall0 = time.monotonic()
        for i, spec in enumerate(self.topo.boards):
            for addr, value in spec.registers.items():
                self.clock.at(0, lambda i=i, a=addr, v=value:
                              self._do_reg_write(i, a, (v,)))
        for w in self.topo.reg_schedule:
            idx = next(k for k, s in enumerate(self.topo.boards)
                       if s.config.board_id == w.board_id)
            self.clock.at(int(w.t_us * 1000.0),
                          lambda idx=idx, w=w:
                          self._do_reg_write(idx, w.addr, w.values))
        for i, spec in enumerate(self.topo.boards):
            if spec.config.mode == TRIGGER_MODE:
                period_f = 1e9 / spec.config.frame_rate_hz
                self._schedule_trigger(i, 0, period_f)
            # rate-mode boards arm through DATA_RATE_CTRL writes (reset 0 = idle)

        self.clock.run()  # drains: generation is bounded by the duration

        boards = [n.board for n in self.nodes]
        for n in self.nodes:
            stuck = len(n.board.fifo) + len(n.board.upstream)
            if stuck or n.sending:
                self.problems.append(
                    f"board {n.board.config.board_id}: {stuck} frames "
                    "undelivered at quiescence")
        self.problems.extend(_verify(self.audit, boards))
        span = max(self.duration_ns, self._last_arrival)
        series = self.acc.series(duration_ns=span)
        report = (summarize(series, hist_max_bps=self.topo.tail_link.rate_bps)
                  if len(series) else empty_report(self.topo.window_us))
        return ChainRunResult(
            mode="virtual", series=series, report=report, audit=self.audit,
            board_stats=_stats(boards, self.first_overflow_ns),
            reg_log=self.reg_log,
            problems=self.problems, framing_error_count=0,
            duration_s=span / 1e9, wall_s=time.monotonic() - wall0,
            frames=self.collected)


def run_virtual(topo: ChainTopology, collect_frames: bool = False) -> ChainRunResult:
    return VirtualChainRun(topo, collect_frames).run()


# ---------------------------------------------------------------------------
# real mode


class RealChannel:
    """Thread-safe bounded frame hand-off with the len/pop/push protocol."""

    def __init__(self, capacity: int = 2):
        self._q = queue.Queue(maxsize=capacity)

    def __len__(self) -> int:
        return self._q.qsize()

    def pop(self):
        try:
            return self._q.get_nowait()
        except queue.Empty:
            return None

    def push(self, frame, stop: threading.Event) -> bool:
        while not stop.is_set():
            try:
                self._q.put(frame, timeout=0.05)
                return True
            except queue.Full:
                continue
        return False


class _RNode:
    def __init__(self, board: Board):
        self.board = board
        self.lock = threading.Lock()
        self.downstream: RealChannel | None = None
        self.done = threading.Event()
        self.reg_server: RegServer | None = None
        self.sock = None


class RealChainRun:
    """Thread-per-board execution over loopback sockets.

    Inter-board links are in-process bounded channels (the connector is
    lossless); rate control happens at the generators, and the tail stream
    rides host TCP to the sink. Intended for desk-scale rates.
    """

    def __init__(self, topo: ChainTopology, collect_frames: bool = False,
                 drain_timeout_s: float = 10.0):
        topo.validate()
        self.topo = topo
        self.collect_frames = collect_frames
        self.drain_timeout_s = drain_timeout_s
        self.problems: list[str] = []
        self.reg_log: list[RegLogEntry] = []
        self.first_overflow_ns: dict[int, float] = {}
        self._stop = threading.Event()
        self._t0 = 0

    def _now_ns(self) -> int:
        return time.monotonic_ns() - self._t0

    def _board_loop(self, idx: int) -> None:
        node = self.nodes[idx]
        board = node.board
        cfg = board.config
        duration_ns = int(self.topo.duration_s * 1e9)
        trigger_mode = cfg.mode == TRIGGER_MODE
        period = 1e9 / cfg.frame_rate_hz if trigger_mode else None
        next_gen = 0.0
        armed = trigger_mode  # rate mode arms when DATA_RATE_CTRL goes nonzero
        gen_done = False
        try:
            while not self._stop.is_set():
                now = self._now_ns()
                if not gen_done and now >= duration_ns:
                    gen_done = True
                if not gen_done:
                    with node.lock:
                        for _ in range(64):  # bounded catch-up per pass
                            if trigger_mode:
                                if next_gen > now or next_gen >= duration_ns:
                                    break
                                board.on_trigger_tick()
                                next_gen += period
                            else:
                                interval = board.gen_interval_ns()
                                if interval is None:
                                    armed = False
                                    break
                                if not armed:
                                    next_gen = now + interval
                                    armed = True
                                if next_gen > now or next_gen >= duration_ns:
                                    break
                                board.emit_rate_frame()
                                next_gen += interval
                        if board.fifo.overflow_count and \
                                cfg.board_id not in self.first_overflow_ns:
                            self.first_overflow_ns[cfg.board_id] = now

                with node.lock:
                    picked = board.select_egress()
                if picked is not None:
                    frame = picked[1]
                    if node.downstream is not None:
                        if not node.downstream.push(frame, self._stop):
                            break
                    else:
                        node.sock.sendall(frame.to_bytes())
                    with node.lock:
                        board.record_egress(self._now_ns(),
                                            frame.serialized_size)
                    continue

                if gen_done:
                    upstream_done = idx == 0 or self.nodes[idx - 1].done.is_set()
                    with node.lock:
                        empty = not board.egress_ready()
                    if upstream_done and empty:
                        break
                time.sleep(0.0002)
        except OSError as err:
            self.problems.append(f"board {cfg.board_id}: egress failed: {err}")
        finally:
            node.done.set()
            if node.sock is not None:
                try:
                    node.sock.close()
                except OSError:
                    pass

    def _apply_reg_writes(self, writes, endpoints) -> None:
        clients = {}
        try:
            for w in writes:
                if self._stop.is_set():
                    return
                target_ns = int(w.t_us * 1000.0)
                while self._now_ns() < target_ns and not self._stop.is_set():
                    time.sleep(min(0.005, (target_ns - self._now_ns()) / 1e9))
                ep = endpoints[w.board_id]
                client = clients.get(w.board_id)
                if client is None:
                    client = clients[w.board_id] = RegClient(ep, timeout=0.2)
                t_us = self._now_ns() / 1000.0
                try:
                    client.write_verified(w.addr, w.values)
                    self.reg_log.append(RegLogEntry(
                        t_us, w.board_id, w.addr, w.values, True))
                except (regproto.Timeout, regproto.VerifyMismatch,
                        regproto.RegError) as err:
                    self.reg_log.append(RegLogEntry(
                        t_us, w.board_id, w.addr, w.values, False, str(err)))
                    self.problems.append(
                        f"register write failed: board {w.board_id} "
                        f"addr {w.addr:#06x}: {err}")
        finally:
            for c in clients.values():
                c.close()

    def run(self) -> ChainRunResult:
        import socket as _socket

        topo = self.topo
        wall0 = time.monotonic()
        sink = SinkServer(topo.sink_host, topo.sink_port,
                          window_us=topo.window_us, seed=topo.seed,
                          content_check=topo.content_check,
                          hist_max_bps=topo.tail_link.rate_bps,
                          collect_frames=self.collect_frames)
        sink_ep = sink.endpoint
        holder: dict = {}

        def _serve():
            try:
                holder["result"] = sink.serve_one(accept_timeout=10.0)
            except Exception as err:  # surfaced as a runtime problem
                holder["error"] = err

        sink_thread = threading.Thread(target=_serve, daemon=True)
        sink_thread.start()

        self.nodes = []
        endpoints = {}
        try:
            for i, spec in enumerate(topo.boards):
                board = Board(spec.config, seed=topo.seed,
                              window_us=topo.window_us)
                node = _RNode(board)
                # datagrams route through the board so counters refresh first
                node.reg_server = RegServer(
                    port=spec.config.udp_port, lock=node.lock,
                    handler=lambda raw, b=board: b.handle_reg_bytes(
                        raw, self._now_ns()))
                endpoints[spec.config.board_id] = node.reg_server.endpoint
                self.nodes.append(node)
            for i in range(1, len(self.nodes)):
                ch = RealChannel(capacity=2)
                self.nodes[i].board.upstream = ch
                self.nodes[i - 1].downstream = ch
            tail = self.nodes[-1]
            tail.sock = _socket.create_connection(sink_ep, timeout=5.0)
            tail.sock.setsockopt(_socket.IPPROTO_TCP, _socket.TCP_NODELAY, 1)

            for node in self.nodes:
                node.reg_server.start()
            self._t0 = time.monotonic_ns()

            initial = [RegWrite(0.0, s.config.board_id, a, (v,))
                       for s in topo.boards for a, v in s.registers.items()]
            self._apply_reg_writes(initial, endpoints)

            threads = [threading.Thread(target=self._board_loop, args=(i,),
                                        daemon=True)
                       for i in range(len(self.nodes))]
            for t in threads:
                t.start()
            sched = threading.Thread(
                target=self._apply_reg_writes,
                args=(topo.reg_schedule, endpoints), daemon=True)
            sched.start()

            deadline = time.monotonic() + topo.duration_s \
                + self.drain_timeout_s
            for t in threads:
                t.join(timeout=max(0.0, deadline - time.monotonic()))
            if any(t.is_alive() for t in threads):
                self.problems.append("board threads did not drain in time")
                self._stop.set()
            sched.join(timeout=1.0)
            sink_thread.join(timeout=5.0)
            if sink_thread.is_alive():
                sink.stop()
                sink_thread.join(timeout=5.0)
        finally:
            self._stop.set()
            for node in self.nodes:
                if node.reg_server is not None:
                    node.reg_server.stop()

        if "error" in holder:
            raise RuntimeError(f"sink failed: {holder['error']}")
        result = holder.get("result")
        if result is None:
            raise RuntimeError("sink produced no result")

        boards = [n.board for n in self.nodes]
        self.problems.extend(_verify(result.audit, boards))
        if result.framing_errors:
            self.problems.append(
                f"{len(result.framing_errors)} framing errors at sink")
        return ChainRunResult(
            mode="real", series=result.series, report=result.report,
            audit=result.audit,
            board_stats=_stats(boards, self.first_overflow_ns),
            reg_log=self.reg_log, problems=self.problems,
            framing_error_count=len(result.framing_errors),
            duration_s=result.duration_s, wall_s=time.monotonic() - wall0,
            frames=result.collected)


def run_real(topo: ChainTopology, collect_frames: bool = False,
             drain_timeout_s: float = 10.0) -> ChainRunResult:
    return RealChainRun(topo, collect_frames=collect_frames,
                        drain_timeout_s=drain_timeout_s).run()


def run_topology(topo: ChainTopology) -> ChainRunResult:
    return run_virtual(topo) if topo.mode == "virtual" else run_real(topo)
