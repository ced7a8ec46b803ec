"""SOP/EOP frame codec for the 64-bit word-stream FIFO interface.

A serialized frame is ``3 header words + payload words + 1 checksum word``,
big-endian within each 64-bit word:

=======  ==============================================================
word 0   magic ``0xD00DF00D`` (upper 32) | payload length in bytes (lower 32)
word 1   board_id (16) | reserved=0 (16) | frame_id (32)
word 2   trigger_id (32) | reserved=0 (32)
...      payload, length a positive multiple of 8
last     reserved=0 (32) | CRC-32 (lower 32) over header+payload bytes
=======  ==============================================================

The CRC is the ubiquitous reflected CRC-32 (poly 0x04C11DB7, init and
final xor 0xFFFFFFFF), i.e. ``zlib.crc32``. On a word stream the first
word of a frame carries SOP, the last EOP, and every word between them
must be valid with no gaps. Between frames, invalid words are skipped.

This byte layout is also exactly what the transport module carries inside
TCP streams, frames back to back.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

MAGIC = 0xD00DF00D
WORD_BYTES = 8
HEADER_WORDS = 3
HEADER_BYTES = HEADER_WORDS * WORD_BYTES
FRAME_OVERHEAD_BYTES = HEADER_BYTES + WORD_BYTES  # header + checksum word

_HEADER = struct.Struct(">IIHHIII")  # magic, plen, board, rsvd, frame, trig, rsvd
_CSUM = struct.Struct(">II")

# FramingError kinds
EOP_BEFORE_SOP = "eop-before-sop"
SOP_IN_FRAME = "sop-in-frame"
GAP_IN_FRAME = "gap-in-frame"
BAD_MAGIC = "bad-magic"
BAD_LENGTH = "bad-length"
BAD_CHECKSUM = "bad-checksum"
TRUNCATED = "truncated"


class InvalidFrame(ValueError):
    """Frame fields violate the layout invariants."""


class FramingError(Exception):
    """One decode fault; the decoder records it and resyncs at the next SOP."""

    def __init__(self, kind: str, offset: int | None = None,
                 frame_id: int | None = None, detail: str = ""):
        self.kind = kind
        self.offset = offset
        self.frame_id = frame_id
        self.detail = detail
        where = f" at {offset}" if offset is not None else ""
        who = f" (frame_id={frame_id})" if frame_id is not None else ""
        super().__init__(f"{kind}{where}{who}" + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class WordEvent:
    """One beat of the FIFO word interface."""

    data: int
    sop: bool = False
    eop: bool = False
    valid: bool = True

    def __post_init__(self):
        if (self.sop or self.eop) and not self.valid:
            raise ValueError("sop/eop require valid")
        if not 0 <= self.data < 1 << 64:
            raise ValueError("data must fit in 64 bits")


@dataclass(frozen=True)
class Frame:
    """One detector readout frame."""

    board_id: int
    frame_id: int
    trigger_id: int
    payload: bytes

    def validate(self) -> None:
        if not 0 <= self.board_id < 1 << 16:
            raise InvalidFrame(f"board_id {self.board_id} out of range")
        if not 0 <= self.frame_id < 1 << 32:
            raise InvalidFrame(f"frame_id {self.frame_id} out of range")
        if not 0 <= self.trigger_id < 1 << 32:
            raise InvalidFrame(f"trigger_id {self.trigger_id} out of range")
        n = len(self.payload)
        if n < 8 or n % 8 or n >= 1 << 32:
            raise InvalidFrame(f"payload length {n} not a positive multiple "
                               "of 8 (min 8, max 2^32-8)")

    @property
    def serialized_size(self) -> int:
        return FRAME_OVERHEAD_BYTES + len(self.payload)

    @property
    def word_count(self) -> int:
        return self.serialized_size // WORD_BYTES

    def header_bytes(self) -> bytes:
        return _HEADER.pack(MAGIC, len(self.payload), self.board_id, 0,
                            self.frame_id, self.trigger_id, 0)

    @property
    def checksum(self) -> int:
        return zlib.crc32(self.payload, zlib.crc32(self.header_bytes()))

    def to_bytes(self) -> bytes:
        self.validate()
        head = self.header_bytes()
        crc = zlib.crc32(self.payload, zlib.crc32(head))
        return head + self.payload + _CSUM.pack(0, crc)


def serialized_size(payload_len: int) -> int:
    """On-wire size of a frame with the given payload length."""
    return FRAME_OVERHEAD_BYTES + payload_len


def encode_frame(frame: Frame) -> list[WordEvent]:
    """Serialize a frame into its SOP/EOP-delimited valid word sequence."""
    raw = frame.to_bytes()
    nwords = len(raw) // WORD_BYTES
    events = []
    for i in range(nwords):
        word = int.from_bytes(raw[i * WORD_BYTES:(i + 1) * WORD_BYTES], "big")
        events.append(WordEvent(word, sop=(i == 0), eop=(i == nwords - 1)))
    return events


def _frame_from_words(words: list[int]) -> Frame:
    raw = b"".join(w.to_bytes(WORD_BYTES, "big") for w in words)
    return _frame_from_bytes(raw)


def _frame_from_bytes(raw: bytes) -> Frame:
    magic, plen, board, _, fid, tid, _ = _HEADER.unpack_from(raw)
    payload = raw[HEADER_BYTES:HEADER_BYTES + plen]
    stored = _CSUM.unpack_from(raw, HEADER_BYTES + plen)[1]
    actual = zlib.crc32(raw[:HEADER_BYTES + plen])
    if stored != actual:
        raise FramingError(BAD_CHECKSUM, frame_id=fid,
                           detail=f"stored {stored:#010x} != {actual:#010x}")
    return Frame(board, fid, tid, payload)


class FrameDecoder:
    """Incremental word-event decoder.

    Feed events in any chunking; completed frames are returned, faults are
    appended to ``errors`` and the decoder resyncs by discarding words until
    the next SOP. Call ``finish()`` at end of stream to flag a frame left
    open.
    """

    def __init__(self):
        self.errors: list[FramingError] = []
        self._words: list[int] = []
        self._in_frame = False
        self._expect: int | None = None
        self._frame_id: int | None = None
        self._offset = 0  # words seen, for error reporting

    def _fault(self, kind: str, detail: str = "") -> None:
        self.errors.append(FramingError(kind, offset=self._offset,
                                        frame_id=self._frame_id, detail=detail))
        self._words.clear()
        self._in_frame = False
        self._expect = None
        self._frame_id = None

    def _open(self, word: int) -> None:
        self._in_frame = True
        self._words = [word]
        magic = word >> 32
        plen = word & 0xFFFFFFFF
        if magic != MAGIC:
            self._fault(BAD_MAGIC, f"{magic:#010x}")
            return
        if plen < 8 or plen % 8:
            self._fault(BAD_LENGTH, f"payload length {plen}")
            return
        self._expect = HEADER_WORDS + plen // WORD_BYTES + 1

    def feed(self, events) -> list[Frame]:
        frames = []
        for ev in events:
            self._step(ev, frames)
            self._offset += 1
        return frames

    def _step(self, ev: WordEvent, frames: list[Frame]) -> None:
        if not self._in_frame:
            if not ev.valid:
                return  # idle gaps are legal
            if ev.sop:
                self._open(ev.data)
                if self._in_frame and ev.eop:
                    # one-word body can never satisfy the layout
                    self._fault(BAD_LENGTH, "eop on header word")
            elif ev.eop:
                self._fault(EOP_BEFORE_SOP)
            # other valid words while resyncing are discarded
            return

        if not ev.valid:
            self._fault(GAP_IN_FRAME)
            return
        if ev.sop:
            self._fault(SOP_IN_FRAME)
            self._open(ev.data)  # the new sop starts the next frame
            return

        self._words.append(ev.data)
        if len(self._words) == 2:
            self._frame_id = ev.data & 0xFFFFFFFF
        if ev.eop:
            if len(self._words) != self._expect:
                self._fault(BAD_LENGTH,
                            f"eop after {len(self._words)} words, "
                            f"expected {self._expect}")
                return
            try:
                frame = _frame_from_words(self._words)
            except FramingError as err:
                self._fault(err.kind, err.detail)
                return
            frames.append(frame)
            self._words.clear()
            self._in_frame = False
            self._expect = None
            self._frame_id = None
        elif len(self._words) >= self._expect:
            self._fault(BAD_LENGTH, "missing eop at expected frame end")

    def finish(self) -> None:
        if self._in_frame:
            self._fault(TRUNCATED, "stream ended mid-frame")


def decode_stream(events) -> tuple[list[Frame], list[FramingError]]:
    """One-shot decode of a word-event sequence; also flags a trailing
    unterminated frame."""
    dec = FrameDecoder()
    frames = dec.feed(events)
    dec.finish()
    return frames, dec.errors


class ByteStreamDecoder:
    """Incremental decoder for the serialized byte stream (TCP payload).

    Frame boundaries are recovered from the self-describing header; on any
    fault one error is recorded and the decoder rescans for the next magic
    word. ``max_payload`` guards resync against absurd corrupted lengths.
    """

    _MAGIC_BYTES = MAGIC.to_bytes(4, "big")

    def __init__(self, max_payload: int = 1 << 26):
        self.errors: list[FramingError] = []
        self.max_payload = max_payload
        self._buf = bytearray()
        self._base = 0  # stream offset of _buf[0]

    def _resync(self, skip: int) -> None:
        """Drop ``skip`` bytes, then scan forward to the next magic."""
        pos = self._buf.find(self._MAGIC_BYTES, skip)
        if pos < 0:
            pos = max(len(self._buf) - 3, skip)
        del self._buf[:pos]
        self._base += pos

    def feed(self, data: bytes) -> list[Frame]:
        self._buf += data
        frames = []
        while True:
            if len(self._buf) < HEADER_BYTES:
                return frames
            magic, plen = struct.unpack_from(">II", self._buf)
            if magic != MAGIC:
                self.errors.append(FramingError(BAD_MAGIC, offset=self._base))
                self._resync(1)
                continue
            if plen < 8 or plen % 8 or plen > self.max_payload:
                self.errors.append(FramingError(
                    BAD_LENGTH, offset=self._base, detail=f"payload {plen}"))
                self._resync(4)
                continue
            total = FRAME_OVERHEAD_BYTES + plen
            if len(self._buf) < total:
                return frames
            try:
                frames.append(_frame_from_bytes(bytes(self._buf[:total])))
            except FramingError as err:
                err.offset = self._base
                self.errors.append(err)
                self._resync(4)
                continue
            del self._buf[:total]
            self._base += total

    def finish(self) -> None:
        if self._buf:
            self.errors.append(FramingError(
                TRUNCATED, offset=self._base,
                detail=f"{len(self._buf)} residual bytes"))
            self._buf.clear()

    @property
    def residual_bytes(self) -> int:
        return len(self._buf)
