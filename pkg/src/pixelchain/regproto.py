"""UDP slow-control protocol: datagram codec, register file, server, client.

Datagram layout (big-endian), 8-byte header plus optional trailer:

======  =====================================================
byte 0  magic 0xA5
byte 1  flags: bit7 reply, bit6 error, bit0 op (0 read, 1 write)
byte 2  sequence id
byte 3  register count (1..64; 0 only in error replies)
4..7    base address, 4-byte aligned
8..     count x 4 data bytes (write requests and success replies),
        or a single error-code byte (error replies)
======  =====================================================

UDP gives no delivery guarantee, so configuration safety comes from the
protocol instead: every write reply carries the post-write read-back of
the touched registers, and the client retransmits with the *same*
sequence id until a matching reply arrives. Writes are absolute stores,
so replays are harmless and replies to earlier transmissions of the same
request are absorbed.
"""

from __future__ import annotations

import random
import socket
import struct
import threading
from dataclasses import dataclass

PACKET_MAGIC = 0xA5
FLAG_REPLY = 0x80
FLAG_ERROR = 0x40
FLAG_WRITE = 0x01
MAX_COUNT = 64

ERR_UNKNOWN_ADDR = 0x01
ERR_READ_ONLY = 0x02
ERR_BAD_COUNT = 0x03

ERROR_NAMES = {
    ERR_UNKNOWN_ADDR: "unknown-address",
    ERR_READ_ONLY: "read-only",
    ERR_BAD_COUNT: "bad-count",
}

_HEADER = struct.Struct(">BBBBI")

# Register map (all 32-bit). Modes: ro registers are written only by
# board-internal logic, never over the wire.
BOARD_ID = 0x0000
DATA_RATE_CTRL = 0x0004   # generator rate in kbit/s, 0 = idle
FRAME_SIZE = 0x0008       # payload bytes, multiple of 8
TRIGGER_CTRL = 0x000C     # bit0 enable
THROUGHPUT_COUNT = 0x0010  # bytes emitted in last completed sample window
FIFO_OCCUPANCY = 0x0014   # bytes
OVERFLOW_COUNT = 0x0018   # dropped frames since reset

REGISTER_MAP = {
    "BOARD_ID": (BOARD_ID, "ro", 0),
    "DATA_RATE_CTRL": (DATA_RATE_CTRL, "rw", 0),
    "FRAME_SIZE": (FRAME_SIZE, "rw", 1024),
    "TRIGGER_CTRL": (TRIGGER_CTRL, "rw", 0),
    "THROUGHPUT_COUNT": (THROUGHPUT_COUNT, "ro", 0),
    "FIFO_OCCUPANCY": (FIFO_OCCUPANCY, "ro", 0),
    "OVERFLOW_COUNT": (OVERFLOW_COUNT, "ro", 0),
}

REGISTER_NAMES = {addr: name for name, (addr, _, _) in REGISTER_MAP.items()}


class InvalidPacket(ValueError):
    """Packet fields violate the protocol invariants."""


class Malformed(ValueError):
    """Bytes do not decode to a packet."""

    def __init__(self, reason: str, seq: int | None = None,
                 addr: int = 0, write: bool = False, code: int = ERR_BAD_COUNT):
        self.reason = reason
        self.seq = seq          # set when recoverable from the datagram
        self.addr = addr
        self.write = write
        self.code = code        # error code a server should answer with
        super().__init__(reason)


class RegError(Exception):
    """Server answered with an error reply."""

    def __init__(self, code: int, packet: "RegPacket"):
        self.code = code
        self.packet = packet
        super().__init__(f"error reply {code:#04x} "
                         f"({ERROR_NAMES.get(code, 'unknown')})")


class Timeout(Exception):
    """No matching reply after all retransmissions."""


class VerifyMismatch(Exception):
    """Write read-back disagrees with the values written."""

    def __init__(self, addr: int, wrote: tuple[int, ...], readback: tuple[int, ...]):
        self.addr = addr
        self.wrote = wrote
        self.readback = readback
        super().__init__(f"read-back mismatch at {addr:#06x}: "
                         f"wrote {wrote}, read {readback}")


@dataclass(frozen=True)
class RegPacket:
    write: bool
    seq: int
    addr: int
    count: int
    reply: bool = False
    error: bool = False
    data: tuple[int, ...] = ()
    error_code: int = 0

    def validate(self) -> None:
        if not 0 <= self.seq < 256:
            raise InvalidPacket(f"seq {self.seq} out of range")
        if self.addr % 4 or not 0 <= self.addr < 1 << 32:
            raise InvalidPacket(f"addr {self.addr:#x} misaligned or out of range")
        if self.error:
            if not self.reply:
                raise InvalidPacket("error flag on a request")
            if self.count != 0 or self.data:
                raise InvalidPacket("error reply carries no data words")
            if not 0 <= self.error_code < 256:
                raise InvalidPacket("error code out of range")
            return
        if not 1 <= self.count <= MAX_COUNT:
            raise InvalidPacket(f"count {self.count} not in 1..{MAX_COUNT}")
        carries = self.write or (self.reply and not self.error)
        want = self.count if carries else 0
        if len(self.data) != want:
            raise InvalidPacket(f"expected {want} data words, have {len(self.data)}")
        for v in self.data:
            if not 0 <= v < 1 << 32:
                raise InvalidPacket(f"data word {v:#x} out of range")


def read_request(seq: int, addr: int, count: int = 1) -> RegPacket:
    return RegPacket(write=False, seq=seq, addr=addr, count=count)


def write_request(seq: int, addr: int, values) -> RegPacket:
    values = tuple(values)
    return RegPacket(write=True, seq=seq, addr=addr, count=len(values),
                     data=values)


def encode_packet(p: RegPacket) -> bytes:
    p.validate()
    flags = (FLAG_REPLY if p.reply else 0) | (FLAG_ERROR if p.error else 0) \
        | (FLAG_WRITE if p.write else 0)
    head = _HEADER.pack(PACKET_MAGIC, flags, p.seq, p.count, p.addr)
    if p.error:
        return head + bytes([p.error_code])
    if p.data:
        return head + b"".join(struct.pack(">I", v) for v in p.data)
    return head


def decode_packet(raw: bytes) -> RegPacket:
    if len(raw) < 1 or raw[0] != PACKET_MAGIC:
        raise Malformed("bad-magic")
    if len(raw) < _HEADER.size:
        seq = raw[2] if len(raw) > 2 else None
        raise Malformed("truncated-header", seq=seq)
    magic, flags, seq, count, addr = _HEADER.unpack_from(raw)
    write = bool(flags & FLAG_WRITE)
    reply = bool(flags & FLAG_REPLY)
    error = bool(flags & FLAG_ERROR)
    body = raw[_HEADER.size:]
    if addr % 4:
        raise Malformed("misaligned-addr", seq=seq, addr=addr, write=write,
                        code=ERR_UNKNOWN_ADDR)
    if error:
        if not reply:
            raise Malformed("error-flag-on-request", seq=seq, addr=addr,
                            write=write)
        if count != 0 or len(body) != 1:
            raise Malformed("bad-error-trailer", seq=seq, addr=addr, write=write)
        return RegPacket(write=write, seq=seq, addr=addr, count=0, reply=True,
                         error=True, error_code=body[0])
    if not 1 <= count <= MAX_COUNT:
        raise Malformed("count-out-of-range", seq=seq, addr=addr, write=write)
    carries = write or reply
    want = 4 * count if carries else 0
    if len(body) != want:
        raise Malformed("truncated" if len(body) < want else "oversized",
                        seq=seq, addr=addr, write=write)
    data = tuple(struct.unpack(f">{count}I", body)) if carries else ()
    return RegPacket(write=write, seq=seq, addr=addr, count=count,
                     reply=reply, data=data)


class RegisterFile:
    """Address-indexed 32-bit registers with ro/rw access modes."""

    def __init__(self, board_id: int = 0):
        self._values = {addr: reset for _, (addr, _, reset) in REGISTER_MAP.items()}
        self._modes = {addr: mode for _, (addr, mode, _) in REGISTER_MAP.items()}
        self._values[BOARD_ID] = board_id & 0xFFFF

    def defined(self, addr: int) -> bool:
        return addr in self._values

    def mode(self, addr: int) -> str:
        return self._modes[addr]

    def read(self, addr: int) -> int:
        return self._values[addr]

    def poke(self, addr: int, value: int) -> None:
        """Internal-logic update; bypasses the ro check (counters etc.)."""
        self._values[addr] = value & 0xFFFFFFFF

    def snapshot(self) -> dict[int, int]:
        return dict(self._values)


def handle_request(p: RegPacket, regs: RegisterFile) -> RegPacket:
    """Serve one request against a register file (mutating it on writes).

    Writes are atomic: either every addressed register is updated or none.
    The reply to a write carries the post-write read-back values.
    """
    def error(code: int) -> RegPacket:
        return RegPacket(write=p.write, seq=p.seq, addr=p.addr, count=0,
                         reply=True, error=True, error_code=code)

    if p.reply:
        raise InvalidPacket("handle_request takes requests only")
    p.validate()
    addrs = [p.addr + 4 * i for i in range(p.count)]
    if any(not regs.defined(a) for a in addrs):
        return error(ERR_UNKNOWN_ADDR)
    if p.write:
        if any(regs.mode(a) == "ro" for a in addrs):
            return error(ERR_READ_ONLY)
        for a, v in zip(addrs, p.data):
            regs.poke(a, v)
    values = tuple(regs.read(a) for a in addrs)
    return RegPacket(write=p.write, seq=p.seq, addr=p.addr, count=p.count,
                     reply=True, data=values)


def handle_datagram(raw: bytes, regs: RegisterFile) -> bytes | None:
    """Decode one datagram, serve it, and encode the reply.

    Malformed input yields an error reply when the sequence id could be
    recovered, otherwise None (drop silently). Replies are never answered.
    """
    try:
        p = decode_packet(raw)
    except Malformed as err:
        if err.seq is None:
            return None
        reply = RegPacket(write=err.write, seq=err.seq, addr=err.addr,
                          count=0, reply=True, error=True, error_code=err.code)
        return encode_packet(reply)
    if p.reply:
        return None
    return encode_packet(handle_request(p, regs))


class RegServer:
    """Threaded UDP endpoint serving one register file.

    ``drop_rx``/``drop_tx`` simulate datagram loss per direction (used by the
    loss-injection tests); ``lock`` serializes access when board logic shares
    the register file. A custom ``handler(raw) -> reply|None`` replaces the
    plain register-file lookup (boards route datagrams through themselves so
    counter registers refresh first).
    """

    def __init__(self, regs: RegisterFile | None = None, host: str = "127.0.0.1",
                 port: int = 0, drop_rx: float = 0.0, drop_tx: float = 0.0,
                 loss_seed: int = 0, lock: threading.Lock | None = None,
                 handler=None):
        if regs is None and handler is None:
            raise ValueError("need a register file or a handler")
        self.regs = regs
        self.handler = handler or (lambda raw: handle_datagram(raw, self.regs))
        self.drop_rx = drop_rx
        self.drop_tx = drop_tx
        self._rng = random.Random(loss_seed)
        self._lock = lock or threading.Lock()
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.bind((host, port))
        self._sock.settimeout(0.05)
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()
        self.rx_count = 0
        self.dropped_rx = 0
        self.dropped_tx = 0

    @property
    def endpoint(self) -> tuple[str, int]:
        return self._sock.getsockname()

    def start(self) -> "RegServer":
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        self._sock.close()

    def __enter__(self) -> "RegServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def _run(self) -> None:
        while not self._stop.is_set():
            try:
                raw, peer = self._sock.recvfrom(2048)
            except socket.timeout:
                continue
            except OSError:
                break
            self.rx_count += 1
            if self.drop_rx and self._rng.random() < self.drop_rx:
                self.dropped_rx += 1
                continue
            with self._lock:
                reply = self.handler(raw)
            if reply is None:
                continue
            if self.drop_tx and self._rng.random() < self.drop_tx:
                self.dropped_tx += 1
                continue
            self._sock.sendto(reply, peer)


@dataclass
class ClientStats:
    ops: int = 0
    retransmits: int = 0
    timeouts: int = 0
    stale_replies: int = 0


class RegClient:
    """Blocking UDP client with same-seq retransmission and read-back checks."""

    def __init__(self, endpoint: tuple[str, int], timeout: float = 0.1,
                 retries: int = 8):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.stats = ClientStats()
        self._seq = random.randrange(256)
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.settimeout(timeout)

    def close(self) -> None:
        self._sock.close()

    def __enter__(self) -> "RegClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _next_seq(self) -> int:
        self._seq = (self._seq + 1) % 256
        return self._seq

    def _transact(self, req: RegPacket) -> RegPacket:
        raw = encode_packet(req)
        self.stats.ops += 1
        for attempt in range(self.retries + 1):
            if attempt:
                self.stats.retransmits += 1
            self._sock.sendto(raw, self.endpoint)
            try:
                while True:
                    got = self._sock.recv(2048)
                    try:
                        reply = decode_packet(got)
                    except Malformed:
                        continue
                    if not reply.reply or reply.seq != req.seq:
                        self.stats.stale_replies += 1
                        continue  # duplicate/stale reply: absorb
                    if reply.error:
                        raise RegError(reply.error_code, reply)
                    return reply
            except socket.timeout:
                self.stats.timeouts += 1
        raise Timeout(f"no reply from {self.endpoint} after "
                      f"{self.retries + 1} attempts")

    def read(self, addr: int, count: int = 1) -> list[int]:
        reply = self._transact(read_request(self._next_seq(), addr, count))
        return list(reply.data)

    def write_verified(self, addr: int, values) -> list[int]:
        """Write, then require the reply's read-back to equal the values."""
        values = tuple(values)
        reply = self._transact(write_request(self._next_seq(), addr, values))
        if reply.data != values:
            raise VerifyMismatch(addr, values, reply.data)
        return list(reply.data)
