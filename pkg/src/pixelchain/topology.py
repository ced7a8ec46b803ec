"""Chain topology description and its YAML file format.

One file fully describes an experiment: board list (head to tail), link
models, sink endpoint, mode, seed, and an optional schedule of register
writes to apply during the run. See the README for the schema and an
example.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import regproto
from .board import BoardConfig
from .transport import DEFAULT_SINK_PORT, DEFAULT_UDP_PORT, LinkModel

DEFAULT_MAX_BOARDS = 4  # mirrors the 4-board chain sizing
DEFAULT_INTER_LINK = LinkModel(rate_bps=10e9)
DEFAULT_TAIL_LINK = LinkModel(rate_bps=5e9)


class TopologyError(ValueError):
    """Configuration is invalid; messages list every problem found."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass
class BoardSpec:
    config: BoardConfig
    registers: dict[int, int] = field(default_factory=dict)
    out_link: LinkModel | None = None  # resolved against inter/tail defaults


@dataclass
class RegWrite:
    t_us: float
    board_id: int
    addr: int
    values: tuple[int, ...]


@dataclass
class ChainTopology:
    boards: list[BoardSpec]
    mode: str = "virtual"
    seed: int = 0
    duration_s: float = 1.0
    window_us: float = 100.0
    inter_link: LinkModel = DEFAULT_INTER_LINK
    tail_link: LinkModel = DEFAULT_TAIL_LINK
    sink_host: str = "127.0.0.1"
    sink_port: int = DEFAULT_SINK_PORT
    max_boards: int = DEFAULT_MAX_BOARDS
    content_check: str = "auto"
    reg_schedule: list[RegWrite] = field(default_factory=list)

    def out_link_for(self, index: int) -> LinkModel:
        spec = self.boards[index]
        if spec.out_link is not None:
            return spec.out_link
        return self.tail_link if index == len(self.boards) - 1 else self.inter_link

    def validate(self) -> None:
        problems = []
        if self.mode not in ("virtual", "real"):
            problems.append(f"mode must be virtual|real, got {self.mode!r}")
        if not self.boards:
            problems.append("topology needs at least one board")
        if len(self.boards) > self.max_boards:
            problems.append(f"{len(self.boards)} boards exceeds "
                            f"max_boards={self.max_boards}")
        if self.duration_s <= 0:
            problems.append("duration_s must be positive")
        if self.window_us <= 0:
            problems.append("window_us must be positive")
        if self.content_check not in ("auto", "off"):
            problems.append("content_check must be auto|off")
        ids = [b.config.board_id for b in self.boards]
        if len(set(ids)) != len(ids):
            problems.append(f"duplicate board_id in {ids}")
        ports = [b.config.udp_port for b in self.boards if b.config.udp_port]
        if len(set(ports)) != len(ports):
            problems.append(f"duplicate udp_port in {ports}")
        for b in self.boards:
            try:
                b.config.validate()
            except ValueError as err:
                problems.append(f"board {b.config.board_id}: {err}")
        for w in self.reg_schedule:
            if w.board_id not in ids:
                problems.append(f"reg_schedule targets unknown board {w.board_id}")
            if w.t_us < 0:
                problems.append("reg_schedule t_us must be >= 0")
            if not w.values:
                problems.append("reg_schedule write needs values")
        if problems:
            raise TopologyError(problems)


def _num(value, what: str) -> float:
    """YAML 1.1 reads bare '5e9' as a string; accept those too."""
    if isinstance(value, (int, float)):
        return float(value)
    try:
        return float(str(value))
    except ValueError:
        raise TopologyError([f"{what}: not a number: {value!r}"]) from None


def _link(doc, what: str) -> LinkModel:
    if not isinstance(doc, dict) or "rate_bps" not in doc:
        raise TopologyError([f"{what}: need a mapping with rate_bps"])
    try:
        return LinkModel(
            rate_bps=_num(doc["rate_bps"], f"{what}.rate_bps"),
            words_per_packet=int(doc.get("words_per_packet", 1)),
            gap_words=int(doc.get("gap_words", 0)),
        )
    except ValueError as err:
        raise TopologyError([f"{what}: {err}"]) from None


def _register_addr(key, what: str) -> int:
    if isinstance(key, int):
        return key
    name = str(key)
    if name in regproto.REGISTER_MAP:
        return regproto.REGISTER_MAP[name][0]
    try:
        return int(name, 0)
    except ValueError:
        raise TopologyError(
            [f"{what}: unknown register {key!r} "
             f"(names: {', '.join(regproto.REGISTER_MAP)})"]) from None


def _board(doc, index: int, base_port: int) -> BoardSpec:
    what = f"boards[{index}]"
    if not isinstance(doc, dict):
        raise TopologyError([f"{what}: must be a mapping"])
    if "board_id" not in doc:
        raise TopologyError([f"{what}: board_id is required"])
    cfg = BoardConfig(
        board_id=int(doc["board_id"]),
        frame_rate_hz=_num(doc.get("frame_rate_hz", 1000.0), f"{what}.frame_rate_hz"),
        frame_payload_bytes=int(doc.get("frame_payload_bytes", 1024)),
        fifo_capacity_bytes=int(_num(doc.get("fifo_capacity_bytes", 8 << 30),
                                     f"{what}.fifo_capacity_bytes")),
        udp_port=int(doc.get("udp_port", base_port + index)),
        generator_mode=str(doc.get("generator_mode", "trigger")),
        clock_hz=_num(doc.get("clock_hz", 80e6), f"{what}.clock_hz"),
    )
    registers = {}
    for key, val in (doc.get("registers") or {}).items():
        registers[_register_addr(key, f"{what}.registers")] = \
            int(_num(val, f"{what}.registers[{key}]"))
    out_link = _link(doc["out_link"], f"{what}.out_link") \
        if "out_link" in doc else None
    return BoardSpec(config=cfg, registers=registers, out_link=out_link)


def topology_from_dict(doc: dict) -> ChainTopology:
    if not isinstance(doc, dict):
        raise TopologyError(["topology file must hold a mapping"])
    unknown = set(doc) - {"mode", "seed", "duration_s", "window_us", "links",
                          "sink", "boards", "max_boards", "content_check",
                          "reg_schedule"}
    if unknown:
        raise TopologyError([f"unknown top-level keys: {sorted(unknown)}"])
    links = doc.get("links") or {}
    sink = doc.get("sink") or {}
    base_port = int(sink.get("udp_base_port", DEFAULT_UDP_PORT))
    boards = [_board(b, i, base_port)
              for i, b in enumerate(doc.get("boards") or [])]
    schedule = []
    for i, w in enumerate(doc.get("reg_schedule") or []):
        what = f"reg_schedule[{i}]"
        if not isinstance(w, dict):
            raise TopologyError([f"{what}: must be a mapping"])
        values = w.get("values", w.get("value"))
        if values is None:
            raise TopologyError([f"{what}: values is required"])
        if not isinstance(values, list):
            values = [values]
        schedule.append(RegWrite(
            t_us=_num(w.get("t_us", 0), f"{what}.t_us"),
            board_id=int(w["board_id"]),
            addr=_register_addr(w.get("register", w.get("addr", 0)), what),
            values=tuple(int(_num(v, f"{what}.values")) for v in values),
        ))
    schedule.sort(key=lambda w: w.t_us)
    topo = ChainTopology(
        boards=boards,
        mode=str(doc.get("mode", "virtual")),
        seed=int(doc.get("seed", 0)),
        duration_s=_num(doc.get("duration_s", 1.0), "duration_s"),
        window_us=_num(doc.get("window_us", 100.0), "window_us"),
        inter_link=_link(links["inter"], "links.inter")
        if "inter" in links else DEFAULT_INTER_LINK,
        tail_link=_link(links["tail"], "links.tail")
        if "tail" in links else DEFAULT_TAIL_LINK,
        sink_host=str(sink.get("host", "127.0.0.1")),
        sink_port=int(sink.get("port", DEFAULT_SINK_PORT)),
        max_boards=int(doc.get("max_boards", DEFAULT_MAX_BOARDS)),
        content_check=str(doc.get("content_check", "auto")),
        reg_schedule=schedule,
    )
    topo.validate()
    return topo


def load_topology(path) -> ChainTopology:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise TopologyError([f"cannot read {path}: {err}"]) from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise TopologyError([f"YAML parse error: {err}"]) from None
    return topology_from_dict(doc)
