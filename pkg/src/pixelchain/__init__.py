"""pixelchain: desk-scale readout-chain simulator and DAQ tools.

A software re-embodiment of a daisy-chained 10 GbE pixel-detector readout
chain: SOP/EOP frame streaming, UDP register access with read-back,
DDR-style bounded FIFO buffering, polling arbitration, and 100 us-window
throughput measurement, runnable in deterministic virtual time or over
real loopback sockets.
"""

__version__ = "0.1.0"

from . import arbiter, buffer, framing, measure, regproto, transport  # noqa: F401
from ._kernels import BACKEND as KERNEL_BACKEND  # noqa: F401
