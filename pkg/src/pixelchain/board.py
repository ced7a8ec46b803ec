"""One readout board: trigger model, frame generator, FIFO, arbiter, registers.

The sensor ASIC is abstracted to a keyed deterministic payload generator:
payload bytes are a pure function of (seed, board_id, frame_id), so the
sink can verify content end to end by regenerating the expected bytes, and
identical configurations replay identical data.

Frame ids increase by one per generated frame even when the FIFO drops the
frame, so the sink's per-board id gaps equal that board's overflow count.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from . import regproto
from ._kernels import frame_key, payload_words
from .arbiter import PollingArbiter
from .buffer import BoundedFrameFifo
from .framing import Frame

TRIGGER_MODE = "trigger"
RATE_MODE = "rate"

_MODE_ALIASES = {
    "trigger": TRIGGER_MODE, "trigger-paced": TRIGGER_MODE,
    "rate": RATE_MODE, "rate-paced": RATE_MODE,
}


def payload_bytes(seed: int, board_id: int, frame_id: int, nbytes: int) -> bytes:
    """Deterministic payload for one frame, big-endian words on the wire."""
    words = payload_words(frame_key(seed, board_id, frame_id), nbytes // 8)
    return words.astype(">u8").tobytes()


def generate_frame(seed: int, board_id: int, frame_id: int, trigger_id: int,
                   payload_len: int) -> Frame:
    return Frame(board_id, frame_id, trigger_id,
                 payload_bytes(seed, board_id, frame_id, payload_len))


@dataclass
class BoardConfig:
    board_id: int
    frame_rate_hz: float = 1000.0
    frame_payload_bytes: int = 1024
    fifo_capacity_bytes: int = 8 << 30
    udp_port: int = 0
    generator_mode: str = TRIGGER_MODE
    clock_hz: float = 80e6  # informational

    def validate(self) -> None:
        if not 0 <= self.board_id < 1 << 16:
            raise ValueError(f"board_id {self.board_id} out of range")
        mode = _MODE_ALIASES.get(self.generator_mode)
        if mode is None:
            raise ValueError(f"unknown generator_mode {self.generator_mode!r}")
        if mode == TRIGGER_MODE and self.frame_rate_hz <= 0:
            raise ValueError("frame_rate_hz must be positive in trigger mode")
        n = self.frame_payload_bytes
        if n < 8 or n % 8:
            raise ValueError(f"frame_payload_bytes {n} not a multiple of 8")
        if self.fifo_capacity_bytes <= 0:
            raise ValueError("fifo_capacity_bytes must be positive")
        if not 0 <= self.udp_port < 65536:
            raise ValueError(f"udp_port {self.udp_port} out of range")

    @property
    def mode(self) -> str:
        return _MODE_ALIASES[self.generator_mode]


class FrameQueue:
    """Minimal ordered frame hand-off (len + push/pop protocol)."""

    def __init__(self):
        self._q = deque()

    def __len__(self) -> int:
        return len(self._q)

    def push(self, frame: Frame) -> None:
        self._q.append(frame)

    def pop(self) -> Frame | None:
        return self._q.popleft() if self._q else None


class WindowCounter:
    """Rolling fixed-window byte counter behind THROUGHPUT_COUNT."""

    def __init__(self, window_ns: float = 100_000.0):
        self.window_ns = window_ns
        self._idx = 0
        self._cur = 0
        self._last = 0

    def _roll(self, now_ns: float) -> None:
        idx = int(now_ns // self.window_ns)
        if idx > self._idx:
            self._last = self._cur if idx == self._idx + 1 else 0
            self._cur = 0
            self._idx = idx

    def add(self, now_ns: float, nbytes: int) -> None:
        self._roll(now_ns)
        self._cur += nbytes

    def last_completed(self, now_ns: float) -> int:
        self._roll(now_ns)
        return self._last


# board_step event kinds
@dataclass(frozen=True)
class TriggerTick:
    now_ns: float


@dataclass(frozen=True)
class DrainGrant:
    now_ns: float


@dataclass(frozen=True)
class RegDatagram:
    data: bytes
    now_ns: float


@dataclass(frozen=True)
class UpstreamFrame:
    frame: Frame


class Board:
    """Single-owner board state; one task mutates it, per the chain design."""

    def __init__(self, config: BoardConfig, seed: int = 0,
                 window_us: float = 100.0):
        config.validate()
        self.config = config
        self.seed = seed
        self.regs = regproto.RegisterFile(config.board_id)
        self.regs.poke(regproto.FRAME_SIZE, config.frame_payload_bytes)
        self.fifo = BoundedFrameFifo(config.fifo_capacity_bytes)
        self.arbiter = PollingArbiter(2)  # 0 = upstream, 1 = local
        self.upstream = FrameQueue()
        self.egress_counter = WindowCounter(window_us * 1000.0)
        self.next_frame_id = 0
        self.trigger_count = 0
        self.generated_frames = 0
        self.generated_bytes = 0
        self.on_register_write = None  # callback(addrs) set by the runner

    # -- register-derived knobs ------------------------------------------

    @property
    def trigger_enabled(self) -> bool:
        return bool(self.regs.read(regproto.TRIGGER_CTRL) & 1)

    @property
    def rate_bps(self) -> float:
        return self.regs.read(regproto.DATA_RATE_CTRL) * 1000.0

    def payload_len(self) -> int:
        """FRAME_SIZE sanitized to the frame layout rules."""
        n = self.regs.read(regproto.FRAME_SIZE)
        n -= n % 8
        return max(n, 8)

    # -- generation -------------------------------------------------------

    def _generate(self, trigger_id: int) -> Frame:
        frame = generate_frame(self.seed, self.config.board_id,
                               self.next_frame_id, trigger_id,
                               self.payload_len())
        self.next_frame_id += 1
        self.generated_frames += 1
        self.generated_bytes += frame.serialized_size
        return frame

    def _store(self, frame: Frame) -> bool:
        ok = self.fifo.push(frame)
        self._sync_fifo_regs()
        return ok

    def on_trigger_tick(self) -> Frame | None:
        """One trigger: numbered tick, gated by TRIGGER_CTRL bit0."""
        trigger_id = self.trigger_count & 0xFFFFFFFF
        self.trigger_count += 1
        if not self.trigger_enabled:
            return None
        frame = self._generate(trigger_id)
        self._store(frame)
        return frame

    def emit_rate_frame(self) -> Frame | None:
        """One rate-paced generation slot (DATA_RATE_CTRL > 0)."""
        if self.rate_bps <= 0:
            return None
        frame = self._generate(self.next_frame_id & 0xFFFFFFFF)
        self._store(frame)
        return frame

    def gen_interval_ns(self) -> float | None:
        """Spacing between rate-paced frames at current registers, or None
        when the generator is idle."""
        rate = self.rate_bps
        if rate <= 0:
            return None
        bits = 8 * (self.payload_len() + 32)
        return bits * 1e9 / rate

    # -- egress -----------------------------------------------------------

    def select_egress(self) -> tuple[int, Frame] | None:
        """Poll upstream then local (round-robin) and take one whole frame."""
        picked = self.arbiter.next_frame([self.upstream, self.fifo])
        if picked is not None and picked[0] == 1:
            self._sync_fifo_regs()
        return picked

    def egress_ready(self) -> bool:
        return len(self.upstream) > 0 or len(self.fifo) > 0

    def record_egress(self, now_ns: float, nbytes: int) -> None:
        self.egress_counter.add(now_ns, nbytes)

    # -- registers --------------------------------------------------------

    def _sync_fifo_regs(self) -> None:
        self.regs.poke(regproto.FIFO_OCCUPANCY,
                       min(self.fifo.occupancy_bytes, 0xFFFFFFFF))
        self.regs.poke(regproto.OVERFLOW_COUNT,
                       min(self.fifo.overflow_count, 0xFFFFFFFF))

    def refresh_counters(self, now_ns: float) -> None:
        self.regs.poke(regproto.THROUGHPUT_COUNT,
                       min(self.egress_counter.last_completed(now_ns),
                           0xFFFFFFFF))
        self._sync_fifo_regs()

    def handle_reg_packet(self, packet: regproto.RegPacket,
                          now_ns: float) -> regproto.RegPacket:
        self.refresh_counters(now_ns)
        reply = regproto.handle_request(packet, self.regs)
        if packet.write and reply.reply and not reply.error:
            if self.on_register_write is not None:
                addrs = [packet.addr + 4 * i for i in range(packet.count)]
                self.on_register_write(addrs)
        return reply

    def handle_reg_bytes(self, raw: bytes, now_ns: float) -> bytes | None:
        """Datagram-level entry: decode, serve, encode; None = drop."""
        try:
            packet = regproto.decode_packet(raw)
        except regproto.Malformed as err:
            if err.seq is None:
                return None
            reply = regproto.RegPacket(write=err.write, seq=err.seq,
                                       addr=err.addr, count=0, reply=True,
                                       error=True, error_code=err.code)
            return regproto.encode_packet(reply)
        if packet.reply:
            return None
        return regproto.encode_packet(self.handle_reg_packet(packet, now_ns))

    # -- generic event dispatch (board_step) ------------------------------

    def step(self, event):
        """Apply one event; returns the emission it produced, if any.

        TriggerTick/``emit_rate_frame`` produce frames into the FIFO,
        DrainGrant returns an (input_index, frame) grant, RegDatagram
        returns reply bytes, UpstreamFrame enqueues for forwarding.
        """
        if isinstance(event, TriggerTick):
            return self.on_trigger_tick()
        if isinstance(event, DrainGrant):
            return self.select_egress()
        if isinstance(event, RegDatagram):
            return self.handle_reg_bytes(event.data, event.now_ns)
        if isinstance(event, UpstreamFrame):
            self.upstream.push(event.frame)
            return None
        raise TypeError(f"unknown board event {event!r}")
