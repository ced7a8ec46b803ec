"""Hot numeric kernels, with a numba backend and a pure-numpy fallback.

The backend is chosen once at import time from the ``PIXELCHAIN_BACKEND``
environment variable: ``numba`` (default when numba is importable) or
``numpy``. Both backends evaluate the same floating-point expressions in
the same order, so results are bit-identical; ``benchmarks/bench_kernels.py``
compares their speed.

Kernels:

* ``payload_words(key, nwords)`` -- keyed counter-hash word stream used for
  deterministic, verifiable frame payloads.
* ``link_completions(ready_ns, dur_ns, busy0_ns)`` -- store-and-forward
  completion times of a frame sequence through a single rate-limited link
  (the recurrence t[i] = max(ready[i], t[i-1]) + dur[i]).
* ``window_sums(t_ns, nbytes, window_ns, nwin)`` -- per-window byte totals
  for fixed, contiguous measurement windows.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

_MASK64 = (1 << 64) - 1

# splitmix64 constants
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def mix64(x: int) -> int:
    """splitmix64 finalizer on a python int (reference / key derivation)."""
    x &= _MASK64
    x = ((x ^ (x >> 30)) * _MIX1) & _MASK64
    x = ((x ^ (x >> 27)) * _MIX2) & _MASK64
    return x ^ (x >> 31)


def frame_key(seed: int, board_id: int, frame_id: int) -> int:
    """64-bit payload-stream key for one (seed, board, frame) triple."""
    k = mix64((seed & _MASK64) + _GOLDEN * (board_id & 0xFFFF))
    return mix64(k + _GOLDEN * (frame_id & 0xFFFFFFFF))


# ---------------------------------------------------------------------------
# numpy backend


def _payload_words_np(key: int, nwords: int) -> np.ndarray:
    ctr = np.arange(1, nwords + 1, dtype=np.uint64)
    z = np.uint64(key) + ctr * np.uint64(_GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def _link_completions_np(ready_ns: np.ndarray, dur_ns: np.ndarray,
                         busy0_ns: float) -> np.ndarray:
    # t[i] = max(ready[i], t[i-1]) + dur[i] rewritten as a prefix scan:
    # with D = cumsum(dur), u[i] = max(busy0, max_{j<=i}(ready[j] - D[j-1])),
    # the completion is t[i] = u[i] + D[i].
    done = np.cumsum(dur_ns)
    prev = np.empty_like(done)
    prev[0] = 0.0
    prev[1:] = done[:-1]
    slack = ready_ns - prev
    slack[0] = max(slack[0], busy0_ns)
    return np.maximum.accumulate(slack) + done


def _window_sums_np(t_ns: np.ndarray, nbytes: np.ndarray, window_ns: float,
                    nwin: int) -> np.ndarray:
    idx = np.floor(t_ns / window_ns).astype(np.int64)
    sums = np.bincount(idx, weights=nbytes.astype(np.float64), minlength=nwin)
    # byte totals stay far below 2**53, so the float sums are exact
    return np.rint(sums).astype(np.int64)


# ---------------------------------------------------------------------------
# numba backend (same expressions, same evaluation order)


def _build_numba():
    from numba import njit

    @njit(cache=True)
    def payload_words_nb(key, nwords):  # pragma: no cover - jitted
        out = np.empty(nwords, dtype=np.uint64)
        g = np.uint64(_GOLDEN)
        m1 = np.uint64(_MIX1)
        m2 = np.uint64(_MIX2)
        k = np.uint64(key)
        for i in range(nwords):
            z = k + (np.uint64(i) + np.uint64(1)) * g
            z = (z ^ (z >> np.uint64(30))) * m1
            z = (z ^ (z >> np.uint64(27))) * m2
            out[i] = z ^ (z >> np.uint64(31))
        return out

    @njit(cache=True)
    def link_completions_nb(ready_ns, dur_ns, busy0_ns):  # pragma: no cover
        n = ready_ns.shape[0]
        out = np.empty(n, dtype=np.float64)
        done = 0.0
        hold = busy0_ns
        for i in range(n):
            slack = ready_ns[i] - done
            if i == 0:
                hold = slack if slack > busy0_ns else busy0_ns
            elif slack > hold:
                hold = slack
            done = done + dur_ns[i]
            out[i] = hold + done
        return out

    @njit(cache=True)
    def window_sums_nb(t_ns, nbytes, window_ns, nwin):  # pragma: no cover
        out = np.zeros(nwin, dtype=np.int64)
        for i in range(t_ns.shape[0]):
            w = np.int64(np.floor(t_ns[i] / window_ns))
            out[w] += nbytes[i]
        return out

    return {
        "payload_words": payload_words_nb,
        "link_completions": link_completions_nb,
        "window_sums": window_sums_nb,
    }


_NUMPY_IMPL = {
    "payload_words": _payload_words_np,
    "link_completions": _link_completions_np,
    "window_sums": _window_sums_np,
}


def _select_backend() -> tuple[str, dict]:
    choice = os.environ.get("PIXELCHAIN_BACKEND", "").strip().lower()
    if choice not in ("", "numba", "numpy"):
        warnings.warn(f"unknown PIXELCHAIN_BACKEND={choice!r}, using default")
        choice = ""
    if choice == "numpy":
        return "numpy", _NUMPY_IMPL
    try:
        return "numba", _build_numba()
    except ImportError:
        if choice == "numba":
            warnings.warn("numba requested but not importable, "
                          "falling back to numpy kernels")
        return "numpy", _NUMPY_IMPL


BACKEND, _IMPL = _select_backend()


def payload_words(key: int, nwords: int) -> np.ndarray:
    """uint64 word stream ``nwords`` long, derived from a 64-bit key."""
    if nwords <= 0:
        return np.empty(0, dtype=np.uint64)
    return _IMPL["payload_words"](np.uint64(key), nwords)


def link_completions(ready_ns: np.ndarray, dur_ns: np.ndarray,
                     busy0_ns: float = 0.0) -> np.ndarray:
    """Completion times (ns) of frames offered to a busy-until ``busy0_ns`` link.

    ``ready_ns[i]`` is when frame i is available at the link input and
    ``dur_ns[i]`` its transfer duration at the link's effective rate.
    """
    ready_ns = np.ascontiguousarray(ready_ns, dtype=np.float64)
    dur_ns = np.ascontiguousarray(dur_ns, dtype=np.float64)
    if ready_ns.shape != dur_ns.shape:
        raise ValueError("ready_ns and dur_ns must have equal shape")
    if ready_ns.size == 0:
        return np.empty(0, dtype=np.float64)
    return _IMPL["link_completions"](ready_ns, dur_ns, float(busy0_ns))


def window_sums(t_ns: np.ndarray, nbytes: np.ndarray, window_ns: float,
                nwin: int | None = None) -> np.ndarray:
    """Sum ``nbytes`` into contiguous windows of ``window_ns``, from t=0."""
    t_ns = np.ascontiguousarray(t_ns, dtype=np.float64)
    nbytes = np.ascontiguousarray(nbytes, dtype=np.int64)
    if t_ns.shape != nbytes.shape:
        raise ValueError("t_ns and nbytes must have equal shape")
    if t_ns.size == 0:
        return np.zeros(nwin or 0, dtype=np.int64)
    if np.any(t_ns < 0):
        raise ValueError("negative arrival time")
    need = int(t_ns.max() // window_ns) + 1
    if nwin is None:
        nwin = need
    elif need > nwin:
        raise ValueError(f"arrivals span {need} windows > nwin={nwin}")
    return _IMPL["window_sums"](t_ns, nbytes, float(window_ns), int(nwin))
