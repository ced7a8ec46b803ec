"""Round-robin polling arbiter over N frame sources, whole-frame grants.

Mid-frame interleaving is forbidden by the word stream's SOP..EOP
continuity rule, so the grant granularity is one frame. The cursor
advances to the input after the one served; an idle poll leaves it
unchanged. With every input ready this degenerates to strict rotation.
"""

from __future__ import annotations

from typing import Optional, Sequence


class PollingArbiter:
    def __init__(self, n_inputs: int):
        if n_inputs < 1:
            raise ValueError("need at least one input")
        self.n_inputs = n_inputs
        self.cursor = 0

    def grant(self, ready: Sequence[bool]) -> Optional[int]:
        """Index of the first ready input in cyclic order from the cursor."""
        if len(ready) != self.n_inputs:
            raise ValueError("ready mask size mismatch")
        for k in range(self.n_inputs):
            idx = (self.cursor + k) % self.n_inputs
            if ready[idx]:
                self.cursor = (idx + 1) % self.n_inputs
                return idx
        return None

    def next_frame(self, sources: Sequence) -> Optional[tuple[int, object]]:
        """Poll sources (anything with __len__ and pop()) and take one frame."""
        idx = self.grant([len(s) > 0 for s in sources])
        if idx is None:
            return None
        return idx, sources[idx].pop()
