import random

import pytest

from pixelchain.board import payload_bytes
from pixelchain.framing import Frame


def make_frame(rng: random.Random, seed: int = 0,
               max_payload_words: int = 64) -> Frame:
    board = rng.randrange(1 << 16)
    fid = rng.randrange(1 << 32)
    n = 8 * rng.randint(1, max_payload_words)
    return Frame(board, fid, rng.randrange(1 << 32),
                 payload_bytes(seed, board, fid, n))


@pytest.fixture
def rng():
    return random.Random(0xC0FFEE)
